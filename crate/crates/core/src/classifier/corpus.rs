//! Labeled beat corpora: the synthetic generator and a CSV loader for
//! externally prepared segments (one row = 180 values then the label).

use std::io::{Read, Write};

use super::{normalize, segment_beats, BeatSegment, ClassLabel, ClassifierError, SEGMENT_LEN};
use crate::signal::{synth, SynthProfile};

/// `beats_per_class` normalized segments of every class, cut at the truth
/// R-peaks of single-class synthetic recordings.
pub fn synthetic_corpus(
    beats_per_class: usize,
    noise_std: f64,
    fs: f64,
    seed: u64,
) -> Result<Vec<BeatSegment>, ClassifierError> {
    let mut out = Vec::with_capacity(beats_per_class * ClassLabel::ALL.len());
    for label in ClassLabel::ALL {
        let mut profile = SynthProfile::single_class(label, 60.0, seed.wrapping_mul(31).wrapping_add(label.index() as u64));
        profile.noise_std = noise_std;
        profile.rr_jitter = 0.02;
        let duration = beats_per_class as f64 + 2.0;
        let window = synth(&profile, duration, fs).map_err(|e| ClassifierError::Dataset(e.to_string()))?;
        let peaks = window.truth_peaks.clone().unwrap_or_default();
        let (segments, _) = segment_beats(&window, &peaks);
        if segments.len() < beats_per_class {
            return Err(ClassifierError::Dataset(format!(
                "class {label}: only {} segments available",
                segments.len()
            )));
        }
        out.extend(segments.iter().take(beats_per_class).map(normalize));
    }
    Ok(out)
}

/// Read `180 values, label` rows. Segments are normalized on load.
pub fn load_csv(reader: impl Read) -> Result<Vec<BeatSegment>, ClassifierError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != SEGMENT_LEN + 1 {
            return Err(ClassifierError::Dataset(format!(
                "row {}: expected {} fields, got {}",
                row + 1,
                SEGMENT_LEN + 1,
                record.len()
            )));
        }
        let samples = record
            .iter()
            .take(SEGMENT_LEN)
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ClassifierError::Dataset(format!("row {}: {e}", row + 1)))?;
        let label: ClassLabel = record[SEGMENT_LEN].parse()?;
        out.push(normalize(&BeatSegment::new(samples, Some(label))?));
    }
    Ok(out)
}

pub fn write_csv(segments: &[BeatSegment], writer: impl Write) -> Result<(), ClassifierError> {
    let mut w = csv::Writer::from_writer(writer);
    for seg in segments {
        let label = seg.label.ok_or_else(|| ClassifierError::Dataset("unlabeled segment".into()))?;
        let mut row: Vec<String> = seg.samples.iter().map(|v| v.to_string()).collect();
        row.push(label.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
