//! Summary statistics, spectrum ranking and heart rate variability.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::DspError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrvReport {
    /// Seconds.
    pub rr_intervals: Vec<f64>,
    pub mean_rr: f64,
    pub std_rr: f64,
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Population standard deviation; even-length medians average the two
/// middle values.
pub fn basic_stats(x: &[f64]) -> Result<StatsReport, DspError> {
    if x.is_empty() {
        return Err(DspError::EmptyInput);
    }
    let (mean, std) = mean_std(x);
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    Ok(StatsReport { mean, std, median, min: sorted[0], max: sorted[n - 1] })
}

/// `|X[k]|` for `k = 0..=n/2`.
pub fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf.truncate(x.len() / 2 + 1);
    buf.iter().map(|c| c.norm()).collect()
}

/// The `k` strongest non-DC bin frequencies, ascending. Ties go to the lower bin.
pub fn dominant_frequencies(x: &[f64], fs: f64, k: usize) -> Result<Vec<f64>, DspError> {
    if x.len() < 2 || k == 0 {
        return Err(DspError::EmptyInput);
    }
    let mag = magnitude_spectrum(x);
    let mut bins: Vec<usize> = (1..mag.len()).collect();
    bins.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]).then(a.cmp(&b)));
    bins.truncate(k);
    bins.sort_unstable();
    let n = x.len() as f64;
    Ok(bins.into_iter().map(|b| b as f64 * fs / n).collect())
}

pub fn hrv(peaks: &[usize], fs: f64) -> Result<HrvReport, DspError> {
    if peaks.len() < 2 {
        return Err(DspError::TooFewPeaks(peaks.len()));
    }
    let rr_intervals: Vec<f64> = peaks.windows(2).map(|w| (w[1] as f64 - w[0] as f64) / fs).collect();
    let (mean_rr, std_rr) = mean_std(&rr_intervals);
    Ok(HrvReport { rr_intervals, mean_rr, std_rr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth, SynthProfile};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rel_close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-300) || a == b
    }

    #[test]
    fn hand_computed_stats() {
        let s = basic_stats(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.mean, s.median, s.min, s.max), (2.5, 2.5, 1.0, 4.0));
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
        let c = basic_stats(&[-0.7; 9]).unwrap();
        assert!((c.mean + 0.7).abs() < 1e-15 && c.std < 1e-15);
        assert_eq!((c.median, c.min, c.max), (-0.7, -0.7, -0.7));
        assert_eq!(basic_stats(&[]), Err(DspError::EmptyInput));
    }

    #[test]
    fn stats_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let n = rng.gen_range(1..300);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let s = basic_stats(&x).unwrap();
            let mut sum = 0.0;
            for v in &x {
                sum += v;
            }
            let mean = sum / n as f64;
            let mut ss = 0.0;
            for v in &x {
                ss += (v - mean).powi(2);
            }
            let (mut lo, mut hi) = (x[0], x[0]);
            for &v in &x {
                lo = if v < lo { v } else { lo };
                hi = if v > hi { v } else { hi };
            }
            // Median by counting: smallest value with at least half the data at or below it.
            let order_stat = |r: usize| {
                *x.iter().find(|&&c| x.iter().filter(|&&v| v < c).count() <= r && x.iter().filter(|&&v| v <= c).count() > r).unwrap()
            };
            let median = if n % 2 == 1 { order_stat(n / 2) } else { 0.5 * (order_stat(n / 2 - 1) + order_stat(n / 2)) };
            assert!(rel_close(s.mean, mean));
            assert!(rel_close(s.std, (ss / n as f64).sqrt()));
            assert!(rel_close(s.median, median));
            assert_eq!((s.min, s.max), (lo, hi));
            assert!(s.min <= s.median && s.median <= s.max && s.std >= 0.0);
        }
    }

    #[test]
    fn three_tone_mixture() {
        let fs = 50.0;
        let x: Vec<f64> = (0..500)
            .map(|i| {
                let t = i as f64 / fs;
                [1.0, 3.0, 5.0].iter().map(|f| (2.0 * PI * f * t).sin()).sum()
            })
            .collect();
        assert_eq!(dominant_frequencies(&x, fs, 3).unwrap(), vec![1.0, 3.0, 5.0]);
        let single: Vec<f64> = (0..500).map(|i| (2.0 * PI * 2.0 * i as f64 / fs).sin()).collect();
        assert_eq!(dominant_frequencies(&single, fs, 1).unwrap(), vec![2.0]);
        assert!(dominant_frequencies(&[1.0], fs, 1).is_err());
    }

    #[test]
    fn noise_ranking_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = x.len();
        let mut mags: Vec<(usize, f64)> = (1..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let th = -2.0 * PI * (k * t) as f64 / n as f64;
                    re += v * th.cos();
                    im += v * th.sin();
                }
                (k, (re * re + im * im).sqrt())
            })
            .collect();
        mags.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut expect: Vec<f64> = mags[..3].iter().map(|&(k, _)| k as f64 * 64.0 / n as f64).collect();
        expect.sort_by(f64::total_cmp);
        assert_eq!(dominant_frequencies(&x, 64.0, 3).unwrap(), expect);
    }

    #[test]
    fn hrv_examples() {
        let r = hrv(&[0, 170, 340, 510], 200.0).unwrap();
        assert!((r.mean_rr - 0.85).abs() < 1e-12 && r.std_rr.abs() < 1e-12);
        assert_eq!(r.rr_intervals.len(), 3);
        let r = hrv(&[10, 30], 10.0).unwrap();
        assert_eq!((r.rr_intervals.clone(), r.std_rr), (vec![2.0], 0.0));
        assert_eq!(hrv(&[5], 10.0), Err(DspError::TooFewPeaks(1)));
    }

    #[test]
    fn jittered_rhythm_mean_rr() {
        let profile = SynthProfile { rr_jitter: 0.02, seed: 4, ..SynthProfile::default() };
        let w = synth(&profile, 60.0, 360.0).unwrap();
        let r = hrv(w.truth_peaks.as_ref().unwrap(), 360.0).unwrap();
        assert!((r.mean_rr - 1.0).abs() <= 0.02);
    }
}
