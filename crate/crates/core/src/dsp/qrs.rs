//! Pan-Tompkins QRS detection.
//!
//! The front end (bandpass, derivative) is also exported as a single FIR so
//! the same waveform can be computed where only linear operations are
//! available; [`detect_from_integrated`] is the shared back end.

use super::filter::{design_bandpass, filtfilt, FilterSpec};

pub const REFRACTORY_S: f64 = 0.2;
const INTEGRATION_S: f64 = 0.15;
const INIT_S: f64 = 2.0;
const SEARCHBACK_RR: f64 = 1.66;
const RR_HISTORY: usize = 8;
/// Magnitude below which the tails of [`front_end_taps`] are dropped,
/// relative to the largest tap.
const TAP_FLOOR: f64 = 1e-4;

/// Centred FIR: `y[i] = sum_j taps[j] * x[i + j - center]`, zero outside `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirTaps {
    pub taps: Vec<f64>,
    pub center: usize,
}

impl FirTaps {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as isize;
        (0..n)
            .map(|i| {
                self.taps
                    .iter()
                    .enumerate()
                    .filter_map(|(j, &t)| {
                        let k = i + j as isize - self.center as isize;
                        (0..n).contains(&k).then(|| t * x[k as usize])
                    })
                    .sum()
            })
            .collect()
    }

    /// Offsets relative to the output index, paired with their taps.
    pub fn offsets(&self) -> impl Iterator<Item = (isize, f64)> + '_ {
        self.taps.iter().enumerate().map(|(j, &t)| (j as isize - self.center as isize, t))
    }
}

/// Order-2 5–15 Hz Butterworth; the upper edge is pulled below Nyquist at
/// low sampling rates.
pub fn qrs_bandpass(fs: f64) -> FilterSpec {
    FilterSpec::new(2, 5.0, 15.0f64.min(0.45 * fs), fs)
}

/// Five-point centred derivative `(-x[i-2] - 2x[i-1] + 2x[i+1] + x[i+2]) * fs / 8`.
pub fn derivative_taps(fs: f64) -> FirTaps {
    let s = fs / 8.0;
    FirTaps { taps: vec![-s, -2.0 * s, 0.0, 2.0 * s, s], center: 2 }
}

pub fn derivative(x: &[f64], fs: f64) -> Vec<f64> {
    derivative_taps(fs).apply(x)
}

pub fn integration_width(fs: f64) -> usize {
    ((INTEGRATION_S * fs).round() as usize).max(1)
}

/// Centred moving average over `width` samples with zero padding.
pub fn moving_window_integrate(x: &[f64], width: usize) -> Vec<f64> {
    let width = width.max(1);
    FirTaps { taps: vec![1.0 / width as f64; width], center: (width - 1) / 2 }.apply(x)
}

/// Zero-phase bandpass followed by the derivative, as one truncated FIR.
/// `None` when no bandpass can be designed at this rate.
pub fn front_end_taps(fs: f64) -> Option<FirTaps> {
    let coeffs = design_bandpass(&qrs_bandpass(fs)).ok()?;
    let half = fs.round().max(16.0) as usize;
    let mut impulse = vec![0.0; 2 * half + 1];
    impulse[half] = 1.0;
    let h = filtfilt(&coeffs, &impulse).ok()?;
    let full = derivative_taps(fs).apply(&h);
    let peak = full.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let first = full.iter().position(|v| v.abs() >= TAP_FLOOR * peak)?;
    // The response is antisymmetric about `half`, so trim both sides equally.
    // `full` is an impulse response; FirTaps correlates, hence the reversal.
    let reach = half - first;
    let taps = full[half - reach..=half + reach].iter().rev().copied().collect();
    Some(FirTaps { taps, center: reach })
}

/// Full detector on a raw window. Returns strictly increasing indices into `x`.
pub fn pan_tompkins(x: &[f64], fs: f64) -> Vec<usize> {
    if !(fs > 0.0) || x.len() < 3 {
        return Vec::new();
    }
    let Ok(coeffs) = design_bandpass(&qrs_bandpass(fs)) else {
        return Vec::new();
    };
    let Ok(filtered) = filtfilt(&coeffs, x) else {
        return Vec::new();
    };
    let squared: Vec<f64> = derivative(&filtered, fs).iter().map(|v| v * v).collect();
    let mwi = moving_window_integrate(&squared, integration_width(fs));
    detect_from_integrated(&mwi, x, fs)
}

/// Adaptive dual-threshold peak picking on the integrated waveform, then
/// refinement of every accepted peak to the signal maximum nearby.
pub fn detect_from_integrated(mwi: &[f64], x: &[f64], fs: f64) -> Vec<usize> {
    let n = mwi.len().min(x.len());
    if n < 3 || !(fs > 0.0) {
        return Vec::new();
    }
    let refractory = ((REFRACTORY_S * fs).round() as usize).max(1);
    let init = &mwi[..n.min(((INIT_S * fs).round() as usize).max(1))];
    let mut spki = 0.25 * init.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut npki = 0.5 * init.iter().sum::<f64>() / init.len() as f64;

    let mut accepted: Vec<usize> = Vec::new();
    let mut noise: Vec<(usize, f64)> = Vec::new();
    for i in 1..n - 1 {
        let v = mwi[i];
        if !(v > mwi[i - 1] && v >= mwi[i + 1]) {
            continue;
        }
        let thr1 = npki + 0.25 * (spki - npki);
        if let Some(&last) = accepted.last() {
            if i - last < refractory {
                if v > thr1 && v > mwi[last] {
                    *accepted.last_mut().unwrap() = i;
                    spki = 0.125 * v + 0.875 * spki;
                }
                continue;
            }
        }
        if v > thr1 {
            if let Some(found) = searchback(&accepted, &noise, i, refractory, 0.5 * thr1) {
                accepted.push(found.0);
                spki = 0.25 * found.1 + 0.75 * spki;
            }
            accepted.push(i);
            spki = 0.125 * v + 0.875 * spki;
            noise.clear();
        } else {
            npki = 0.125 * v + 0.875 * npki;
            noise.push((i, v));
        }
    }

    let reach = integration_width(fs) / 2;
    let mut peaks: Vec<usize> = Vec::with_capacity(accepted.len());
    for c in accepted {
        let lo = c.saturating_sub(reach);
        let hi = (c + reach).min(n - 1);
        let r = (lo..=hi).fold(lo, |best, k| if x[k] > x[best] { k } else { best });
        match peaks.last_mut() {
            Some(last) if r < *last + refractory => {
                if x[r] > x[*last] {
                    *last = r;
                }
            }
            _ => peaks.push(r),
        }
    }
    peaks
}

/// Largest sub-threshold candidate in a gap longer than 1.66 mean RR.
fn searchback(
    accepted: &[usize],
    noise: &[(usize, f64)],
    current: usize,
    refractory: usize,
    thr2: f64,
) -> Option<(usize, f64)> {
    if accepted.len() < 2 {
        return None;
    }
    let last = *accepted.last()?;
    let rr: Vec<usize> = accepted.windows(2).rev().take(RR_HISTORY).map(|w| w[1] - w[0]).collect();
    let mean_rr = rr.iter().sum::<usize>() as f64 / rr.len() as f64;
    if ((current - last) as f64) <= SEARCHBACK_RR * mean_rr {
        return None;
    }
    noise
        .iter()
        .filter(|&&(k, v)| v > thr2 && k >= last + refractory && k + refractory <= current)
        .fold(None, |best: Option<(usize, f64)>, &(k, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassLabel;
    use crate::signal::{synth, SynthProfile};
    use std::collections::BTreeMap;

    fn assert_matches_truth(found: &[usize], truth: &[usize]) {
        assert_eq!(found.len(), truth.len(), "found {found:?}\ntruth {truth:?}");
        for (f, t) in found.iter().zip(truth) {
            assert!(f.abs_diff(*t) <= 2, "found {found:?}\ntruth {truth:?}");
        }
    }

    #[test]
    fn flat_signal_has_no_peaks() {
        assert!(pan_tompkins(&[0.0; 2000], 360.0).is_empty());
        assert!(pan_tompkins(&[], 360.0).is_empty());
    }

    #[test]
    fn peaks_at_hundred_sample_spacing() {
        let w = synth(&SynthProfile::default(), 10.0, 200.0).unwrap();
        let truth = w.truth_peaks.clone().unwrap();
        assert_eq!(&truth[..3], &[100, 300, 500]);
        assert_matches_truth(&pan_tompkins(&w.samples, 200.0), &truth);
    }

    #[test]
    fn count_at_sixty_bpm() {
        let w = synth(&SynthProfile::default(), 30.0, 360.0).unwrap();
        let n = pan_tompkins(&w.samples, 360.0).len();
        assert!((29..=31).contains(&n), "{n}");
    }

    #[test]
    fn every_class_and_rate() {
        for label in ClassLabel::ALL {
            for (bpm, fs) in [(50.0, 360.0), (75.0, 250.0), (110.0, 360.0), (140.0, 128.0)] {
                let w = synth(&SynthProfile::single_class(label, bpm, 3), 10.0, fs).unwrap();
                let found = pan_tompkins(&w.samples, fs);
                assert_matches_truth(&found, w.truth_peaks.as_ref().unwrap());
            }
        }
    }

    #[test]
    fn mixed_classes_with_wander() {
        let profile = SynthProfile {
            bpm: 72.0,
            class_mix: BTreeMap::from([(ClassLabel::N, 0.5), (ClassLabel::V, 0.25), (ClassLabel::A, 0.25)]),
            baseline_wander_hz: 0.3,
            rr_jitter: 0.02,
            seed: 11,
            ..SynthProfile::default()
        };
        let w = synth(&profile, 20.0, 360.0).unwrap();
        assert_matches_truth(&pan_tompkins(&w.samples, 360.0), w.truth_peaks.as_ref().unwrap());
    }

    #[test]
    fn refractory_holds_on_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..3600).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let peaks = pan_tompkins(&x, 360.0);
        assert!(peaks.windows(2).all(|w| w[1] - w[0] >= 72));
    }

    #[test]
    fn derivative_of_ramp() {
        let x: Vec<f64> = (0..10).map(|i| 3.0 * i as f64).collect();
        let d = derivative(&x, 100.0);
        for v in &d[2..8] {
            assert!((v - 300.0).abs() < 1e-9);
        }
    }

    #[test]
    fn integration_is_centred_average() {
        let y = moving_window_integrate(&[0.0, 0.0, 3.0, 0.0, 0.0], 3);
        assert_eq!(y, vec![0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(integration_width(360.0), 54);
    }

    #[test]
    fn front_end_fir_tracks_iir_path() {
        let fs = 360.0;
        let w = synth(&SynthProfile::default(), 10.0, fs).unwrap();
        let coeffs = design_bandpass(&qrs_bandpass(fs)).unwrap();
        let iir = derivative(&filtfilt(&coeffs, &w.samples).unwrap(), fs);
        let fir = front_end_taps(fs).unwrap();
        assert_eq!(fir.taps.len(), 2 * fir.center + 1);
        let approx = fir.apply(&w.samples);
        let peak = iir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let interior = fir.taps.len()..w.len() - fir.taps.len();
        for i in interior {
            assert!((iir[i] - approx[i]).abs() <= 1e-3 * peak, "{i}");
        }
        let sq: Vec<f64> = approx.iter().map(|v| v * v).collect();
        let mwi = moving_window_integrate(&sq, integration_width(fs));
        assert_eq!(detect_from_integrated(&mwi, &w.samples, fs), pan_tompkins(&w.samples, fs));
    }
}
