//! Beat segmentation and arrhythmia classification.

mod cnn;
mod corpus;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::SignalWindow;

pub use cnn::{grad_check, CnnModel, EpochStats, Gradients, Hyperparams, TrainReport};
pub use corpus::{load_csv, synthetic_corpus, write_csv};

/// Samples per beat segment; the R-peak sits at index [`SEGMENT_CENTER`].
pub const SEGMENT_LEN: usize = 180;
pub const SEGMENT_CENTER: usize = 90;
pub const NUM_CLASSES: usize = 5;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("class {0} missing from the training split")]
    ClassMissing(ClassLabel),
    #[error("segment is not normalized (min {min}, max {max})")]
    UnnormalizedInput { min: f64, max: f64 },
    #[error("unknown class label `{0}`")]
    UnknownLabel(String),
    #[error("segment must have {SEGMENT_LEN} samples, got {0}")]
    BadLength(usize),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    /// Normal beat.
    N,
    /// Left bundle branch block.
    L,
    /// Right bundle branch block.
    R,
    /// Atrial premature contraction.
    A,
    /// Ventricular premature contraction.
    V,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] =
        [ClassLabel::N, ClassLabel::L, ClassLabel::R, ClassLabel::A, ClassLabel::V];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn symbol(self) -> char {
        match self {
            ClassLabel::N => 'N',
            ClassLabel::L => 'L',
            ClassLabel::R => 'R',
            ClassLabel::A => 'A',
            ClassLabel::V => 'V',
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

impl FromStr for ClassLabel {
    type Err = ClassifierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "N" => Ok(ClassLabel::N),
            "L" => Ok(ClassLabel::L),
            "R" => Ok(ClassLabel::R),
            "A" => Ok(ClassLabel::A),
            "V" => Ok(ClassLabel::V),
            other => Err(ClassifierError::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeatSegment {
    pub samples: Vec<f64>,
    pub label: Option<ClassLabel>,
    /// Index of the R-peak in the source window.
    pub center_index: usize,
}

impl BeatSegment {
    pub fn new(samples: Vec<f64>, label: Option<ClassLabel>) -> Result<Self, ClassifierError> {
        if samples.len() != SEGMENT_LEN {
            return Err(ClassifierError::BadLength(samples.len()));
        }
        Ok(Self { samples, label, center_index: SEGMENT_CENTER })
    }
}

/// Cut one segment per peak whose full window fits. Labels are taken from
/// the window's truth annotations when a peak coincides with a truth peak.
/// Returns the segments and the number of skipped peaks.
pub fn segment_beats(window: &SignalWindow, peaks: &[usize]) -> (Vec<BeatSegment>, usize) {
    let mut segments = Vec::with_capacity(peaks.len());
    let mut skipped = 0;
    for &p in peaks {
        if p < SEGMENT_CENTER || p + (SEGMENT_LEN - SEGMENT_CENTER) > window.samples.len() {
            skipped += 1;
            continue;
        }
        let label = match (&window.truth_peaks, &window.truth_labels) {
            (Some(tp), Some(tl)) => tp.binary_search(&p).ok().map(|i| tl[i]),
            _ => None,
        };
        segments.push(BeatSegment {
            samples: window.samples[p - SEGMENT_CENTER..p + SEGMENT_LEN - SEGMENT_CENTER].to_vec(),
            label,
            center_index: p,
        });
    }
    (segments, skipped)
}

/// Min-max scale to `[0, 1]`. A flat segment maps to all 0.5.
pub fn normalize(segment: &BeatSegment) -> BeatSegment {
    let (min, max) = min_max(&segment.samples);
    let samples = if max > min {
        let span = max - min;
        segment.samples.iter().map(|&v| (v - min) / span).collect()
    } else {
        vec![0.5; segment.samples.len()]
    };
    BeatSegment { samples, ..segment.clone() }
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

pub(crate) fn check_normalized(samples: &[f64]) -> Result<(), ClassifierError> {
    if samples.len() != SEGMENT_LEN {
        return Err(ClassifierError::BadLength(samples.len()));
    }
    let (min, max) = min_max(samples);
    let flat = samples.iter().all(|&v| (v - 0.5).abs() <= 1e-6);
    if flat || (min.abs() <= 1e-6 && (max - 1.0).abs() <= 1e-6) {
        Ok(())
    } else {
        Err(ClassifierError::UnnormalizedInput { min, max })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth, SynthProfile};
    use proptest::prelude::*;

    #[test]
    fn segment_boundaries() {
        let w = SignalWindow::new((0..180).map(|v| v as f64).collect(), 360.0, 0);
        let (segs, skipped) = segment_beats(&w, &[90]);
        assert_eq!(skipped, 0);
        assert_eq!(segs[0].samples, w.samples);
        assert_eq!(segs[0].center_index, 90);
        let (segs, skipped) = segment_beats(&w, &[10, 91]);
        assert!(segs.is_empty());
        assert_eq!(skipped, 2);
    }

    #[test]
    fn segment_count_matches_interior_truth() {
        let w = synth(&SynthProfile::default(), 60.0, 360.0).unwrap();
        let truth = w.truth_peaks.clone().unwrap();
        let interior = truth.iter().filter(|&&p| p >= 90 && p + 90 <= w.len()).count();
        let (segs, skipped) = segment_beats(&w, &truth);
        assert_eq!(segs.len(), interior);
        assert_eq!(skipped, truth.len() - interior);
        assert!(segs.iter().all(|s| s.label == Some(ClassLabel::N)));
    }

    #[test]
    fn normalize_ramp_and_flat() {
        let ramp = BeatSegment::new((0..180).map(|v| v as f64 * 3.0 - 7.0).collect(), None).unwrap();
        let n = normalize(&ramp);
        assert_eq!(n.samples[0], 0.0);
        assert_eq!(n.samples[179], 1.0);
        check_normalized(&n.samples).unwrap();
        let flat = BeatSegment::new(vec![2.5; 180], None).unwrap();
        assert!(normalize(&flat).samples.iter().all(|&v| v == 0.5));
        check_normalized(&normalize(&flat).samples).unwrap();
        assert!(check_normalized(&ramp.samples).is_err());
    }

    #[test]
    fn label_parsing() {
        for l in ClassLabel::ALL {
            assert_eq!(l.to_string().parse::<ClassLabel>().unwrap(), l);
            assert_eq!(ClassLabel::from_index(l.index()), Some(l));
        }
        assert!("Q".parse::<ClassLabel>().is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-100.0f64..100.0, SEGMENT_LEN)) {
            let s = BeatSegment::new(v, None).unwrap();
            let once = normalize(&s);
            let twice = normalize(&once);
            for (a, b) in once.samples.iter().zip(&twice.samples) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
