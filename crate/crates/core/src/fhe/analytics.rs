//! Server-side operations on ciphertexts, analyst-side finishing steps and
//! the plaintext/encrypted comparison report.
//!
//! Peak picking, median, min, max and frequency ranking need comparisons, so
//! they run after decryption: the server produces the integrated QRS
//! waveform and DFT projections, the analyst decrypts and finishes.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{CtMeta, HeBackend, HeError, Weight};
use crate::dsp::{
    basic_stats, detect_from_integrated, dominant_frequencies, front_end_taps, hrv, integration_width, pan_tompkins,
    FirTaps, HrvReport, StatsReport,
};
use crate::signal::SignalWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Peaks,
    Stats,
    Frequency,
    Hrv,
}

impl Analysis {
    pub const ALL: [Analysis; 4] = [Analysis::Peaks, Analysis::Stats, Analysis::Frequency, Analysis::Hrv];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub analyses: Vec<Analysis>,
    /// Number of dominant frequencies reported.
    pub top_k: usize,
    /// Highest frequency probed on the encrypted path.
    pub probe_max_hz: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self { analyses: Analysis::ALL.to_vec(), top_k: 3, probe_max_hz: 15.0 }
    }
}

impl CompareOptions {
    fn wants(&self, a: Analysis) -> bool {
        self.analyses.contains(&a)
    }

    fn needs_peaks(&self) -> bool {
        self.wants(Analysis::Peaks) || self.wants(Analysis::Hrv)
    }
}

/// Results of one path (plaintext or encrypted) for the requested analyses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisValues {
    pub peaks: Option<Vec<usize>>,
    pub stats: Option<StatsReport>,
    pub dominant_frequencies: Option<Vec<f64>>,
    pub hrv: Option<HrvReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub plaintext: f64,
    pub encrypted: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub metrics: Vec<MetricComparison>,
    pub peak_match_pct: Option<f64>,
    pub frequency_match_pct: Option<f64>,
    pub hrv_mean_ratio: Option<f64>,
    pub hrv_std_ratio: Option<f64>,
    pub plaintext: AnalysisValues,
    pub encrypted: AnalysisValues,
}

/// `100 · min(|a|,|b|) / max(|a|,|b|)`; 100 when equal, 0 when signs differ.
pub fn compare_ratio(a: f64, b: f64) -> f64 {
    if a == b {
        return 100.0;
    }
    if !a.is_finite() || !b.is_finite() || a * b < 0.0 {
        return 0.0;
    }
    let (lo, hi) = (a.abs().min(b.abs()), a.abs().max(b.abs()));
    100.0 * lo / hi
}

fn match_pct(a: &[usize], b: &[usize]) -> f64 {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 100.0;
    }
    let common = a.iter().filter(|v| b.contains(v)).count();
    100.0 * common as f64 / denom as f64
}

fn freq_match_pct(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len().max(b.len());
    if k == 0 {
        return 100.0;
    }
    let common = a.iter().filter(|x| b.iter().any(|y| (*x - y).abs() < 1e-9)).count();
    100.0 * common as f64 / k as f64
}

impl ComparisonReport {
    pub fn from_values(plaintext: AnalysisValues, encrypted: AnalysisValues) -> Self {
        let mut metrics = Vec::new();
        let mut push = |name: &str, a: f64, b: f64| {
            metrics.push(MetricComparison { metric: name.into(), plaintext: a, encrypted: b, ratio: compare_ratio(a, b) })
        };
        if let (Some(p), Some(e)) = (&plaintext.stats, &encrypted.stats) {
            push("mean", p.mean, e.mean);
            push("std", p.std, e.std);
            push("median", p.median, e.median);
            push("min", p.min, e.min);
            push("max", p.max, e.max);
        }
        let (mut hrv_mean_ratio, mut hrv_std_ratio) = (None, None);
        if let (Some(p), Some(e)) = (&plaintext.hrv, &encrypted.hrv) {
            push("mean_rr", p.mean_rr, e.mean_rr);
            push("std_rr", p.std_rr, e.std_rr);
            hrv_mean_ratio = Some(compare_ratio(p.mean_rr, e.mean_rr));
            hrv_std_ratio = Some(compare_ratio(p.std_rr, e.std_rr));
        }
        let peak_match_pct = match (&plaintext.peaks, &encrypted.peaks) {
            (Some(p), Some(e)) => Some(match_pct(p, e)),
            _ => None,
        };
        let frequency_match_pct = match (&plaintext.dominant_frequencies, &encrypted.dominant_frequencies) {
            (Some(p), Some(e)) => Some(freq_match_pct(p, e)),
            _ => None,
        };
        Self { metrics, peak_match_pct, frequency_match_pct, hrv_mean_ratio, hrv_std_ratio, plaintext, encrypted }
    }

    pub fn metric(&self, name: &str) -> Option<&MetricComparison> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

fn dsp_err(e: crate::dsp::DspError) -> HeError {
    HeError::InvalidInput(e.to_string())
}

/// Zero every slot from `n` on.
pub fn he_mask<B: HeBackend>(b: &B, ct: &B::Ct, n: usize) -> Result<B::Ct, HeError> {
    let ones = vec![Complex64::new(1.0, 0.0); n];
    let mut out = b.mul_plain(ct, &ones)?;
    b.set_meta(&mut out, CtMeta { logical_len: n, tail_clean: true });
    Ok(out)
}

fn clean_prefix<B: HeBackend>(b: &B, ct: &B::Ct, n: usize) -> Result<B::Ct, HeError> {
    let meta = b.meta(ct);
    if n == 0 || n > meta.logical_len {
        return Err(HeError::InvalidInput(format!("length {n} outside 1..={}", meta.logical_len)));
    }
    if meta.tail_clean && n == meta.logical_len {
        Ok(ct.clone())
    } else {
        he_mask(b, ct, n)
    }
}

/// Sum of the first `n` slots, delivered in slot 0.
pub fn he_sum<B: HeBackend>(b: &B, ct: &B::Ct, n: usize) -> Result<B::Ct, HeError> {
    let mut acc = clean_prefix(b, ct, n)?;
    let mut k = 1;
    while k < n.next_power_of_two() {
        acc = b.add(&acc, &b.rotate(&acc, k)?)?;
        k <<= 1;
    }
    b.set_meta(&mut acc, CtMeta { logical_len: 1, tail_clean: false });
    Ok(acc)
}

pub fn he_square<B: HeBackend>(b: &B, ct: &B::Ct) -> Result<B::Ct, HeError> {
    b.mul(ct, ct)
}

/// Mean and population variance of the first `n` slots, each in slot 0.
/// Both variance terms follow the same multiply/rescale sequence so their
/// scales agree exactly.
pub fn he_mean_var<B: HeBackend>(b: &B, ct: &B::Ct, n: usize) -> Result<(B::Ct, B::Ct), HeError> {
    if b.level(ct) == 0 {
        return Err(HeError::LevelExhausted);
    }
    let x = clean_prefix(b, ct, n)?;
    let inv = 1.0 / n as f64;
    let s = he_sum(b, &x, n)?;
    let mean = b.mul_scalar(&s, inv)?;
    let ex2 = b.mul_scalar(&b.mul_scalar(&he_sum(b, &he_square(b, &x)?, n)?, inv)?, 1.0)?;
    let m2 = b.mul_scalar(&b.mul_scalar(&he_square(b, &s)?, inv)?, inv)?;
    let var = b.sub(&ex2, &m2)?;
    Ok((mean, var))
}

/// `y[i] = Σ_j taps[j] · x[i + j − center]` over the logical window, with
/// zeros outside it.
pub fn he_linear_filter<B: HeBackend>(b: &B, ct: &B::Ct, taps: &FirTaps) -> Result<B::Ct, HeError> {
    if taps.taps.is_empty() || taps.center >= taps.taps.len() {
        return Err(HeError::InvalidInput("empty taps or center outside taps".into()));
    }
    let n = b.logical_len(ct);
    let slots = b.slot_count();
    let reach = taps.center.max(taps.taps.len() - 1 - taps.center);
    if n + reach > slots {
        return Err(HeError::WindowTooLong { len: n, reach, slots });
    }
    let x = clean_prefix(b, ct, n)?;
    let offsets: Vec<(isize, f64)> = taps.offsets().collect();
    let mut y = b.fir(&x, &offsets)?;
    b.set_meta(&mut y, CtMeta { logical_len: n, tail_clean: false });
    Ok(y)
}

/// Encrypted Pan-Tompkins front end: bandpass and derivative as one FIR,
/// squaring, then moving-window integration.
pub fn he_integrated_waveform<B: HeBackend>(b: &B, ct: &B::Ct, fs: f64) -> Result<B::Ct, HeError> {
    let front = front_end_taps(fs).ok_or_else(|| HeError::InvalidInput(format!("no QRS bandpass at {fs} Hz")))?;
    let w = integration_width(fs);
    let mwi = FirTaps { taps: vec![1.0 / w as f64; w], center: (w - 1) / 2 };
    let y = he_linear_filter(b, ct, &front)?;
    let sq = he_square(b, &y)?;
    he_linear_filter(b, &sq, &mwi)
}

/// DFT bin frequencies `k·fs/n` for `k ≥ 1` up to `min(max_hz, fs/2)`.
pub fn probe_frequencies(n: usize, fs: f64, max_hz: f64) -> Vec<f64> {
    let top = max_hz.min(fs / 2.0);
    let kmax = (top * n as f64 / fs + 1e-9).floor() as usize;
    (1..=kmax).map(|k| k as f64 * fs / n as f64).collect()
}

/// Complex DFT projections packed into one ciphertext: slot `k` holds
/// `Σ_t x_t e^{-iω_k t}` over the first `n` slots. Its real part is the cosine
/// projection and its imaginary part minus the sine one.
///
/// Evaluated as a rectangular matrix-vector product: one diagonal transform
/// over `F' = next_pow2(freqs)` rotations, then a strided fold.
pub fn he_dft<B: HeBackend>(b: &B, ct: &B::Ct, freqs: &[f64], fs: f64, n: usize) -> Result<B::Ct, HeError> {
    let slots = b.slot_count();
    if n == 0 || n > b.logical_len(ct) {
        return Err(HeError::InvalidInput(format!("length {n} outside 1..={}", b.logical_len(ct))));
    }
    if freqs.is_empty() || freqs.len() > slots {
        return Err(HeError::InvalidInput(format!("{} frequencies for {slots} slots", freqs.len())));
    }
    if let Some(f) = freqs.iter().find(|&&f| !(0.0..=fs / 2.0).contains(&f)) {
        return Err(HeError::InvalidInput(format!("frequency {f} Hz outside [0, {}]", fs / 2.0)));
    }
    let rows = freqs.len().next_power_of_two();
    let omega: Vec<f64> = freqs.iter().map(|f| 2.0 * PI * f / fs).collect();
    let zero = Complex64::new(0.0, 0.0);
    let terms: Vec<(usize, Weight)> = (0..rows)
        .filter_map(|d| {
            let diag: Vec<Complex64> = (0..slots)
                .map(|j| {
                    let (row, col) = (j % rows, (j + d) % slots);
                    if row < freqs.len() && col < n {
                        Complex64::from_polar(1.0, -omega[row] * col as f64)
                    } else {
                        zero
                    }
                })
                .collect();
            diag.iter().any(|v| *v != zero).then_some((d, Weight::Slots(diag)))
        })
        .collect();
    let mut y = b.linear_transform(ct, &terms)?;
    let mut k = rows;
    while k < slots {
        y = b.add(&y, &b.rotate(&y, k)?)?;
        k <<= 1;
    }
    b.set_meta(&mut y, CtMeta { logical_len: freqs.len(), tail_clean: false });
    Ok(y)
}

/// Decrypted `(cos, sin)` projections of a [`he_dft`] output.
pub fn dft_projections<B: HeBackend>(b: &B, ct: &B::Ct) -> Result<Vec<(f64, f64)>, HeError> {
    let n = b.logical_len(ct);
    Ok(b.decrypt_complex(ct)?.iter().take(n).map(|z| (z.re, -z.im)).collect())
}

/// Ciphertext outputs of the server half of the encrypted path.
#[derive(Debug, Clone)]
pub struct EncryptedResults<C> {
    pub n: usize,
    pub fs: f64,
    pub mean: Option<C>,
    pub variance: Option<C>,
    pub integrated: Option<C>,
    /// Probed frequencies and their packed projections.
    pub spectrum: Option<(Vec<f64>, C)>,
}

/// Everything the server computes for `opts` on an encrypted window. Needs
/// only public and evaluation keys.
pub fn encrypted_server<B: HeBackend>(
    b: &B,
    ct: &B::Ct,
    fs: f64,
    opts: &CompareOptions,
) -> Result<EncryptedResults<B::Ct>, HeError> {
    let n = b.logical_len(ct);
    let mut out = EncryptedResults { n, fs, mean: None, variance: None, integrated: None, spectrum: None };
    if opts.wants(Analysis::Stats) {
        let (m, v) = he_mean_var(b, ct, n)?;
        out.mean = Some(m);
        out.variance = Some(v);
    }
    if opts.needs_peaks() {
        out.integrated = Some(he_integrated_waveform(b, ct, fs)?);
    }
    if opts.wants(Analysis::Frequency) {
        let freqs = probe_frequencies(n, fs, opts.probe_max_hz);
        if !freqs.is_empty() {
            let packed = he_dft(b, ct, &freqs, fs, n)?;
            out.spectrum = Some((freqs, packed));
        }
    }
    Ok(out)
}

/// Analyst half: decrypt and run the comparison-based steps. `window` is
/// the encrypted window the server worked on.
pub fn encrypted_finish<B: HeBackend>(
    b: &B,
    window: &B::Ct,
    res: &EncryptedResults<B::Ct>,
    opts: &CompareOptions,
) -> Result<AnalysisValues, HeError> {
    let x = b.decrypt(window)?;
    let x = &x[..res.n.min(x.len())];
    let mut out = AnalysisValues::default();
    if let (Some(m), Some(v)) = (&res.mean, &res.variance) {
        let mean = b.decrypt_complex(m)?[0].re;
        let var = b.decrypt_complex(v)?[0].re;
        let local = basic_stats(x).map_err(dsp_err)?;
        out.stats = Some(StatsReport { mean, std: var.max(0.0).sqrt(), ..local });
    }
    if let Some(ct) = &res.integrated {
        let mwi = b.decrypt(ct)?;
        let peaks = detect_from_integrated(&mwi[..res.n.min(mwi.len())], x, res.fs);
        if opts.wants(Analysis::Hrv) {
            out.hrv = hrv(&peaks, res.fs).ok();
        }
        if opts.wants(Analysis::Peaks) {
            out.peaks = Some(peaks);
        }
    }
    if opts.wants(Analysis::Frequency) {
        let mut mags: Vec<(f64, f64)> = match &res.spectrum {
            Some((freqs, ct)) => {
                freqs.iter().zip(dft_projections(b, ct)?).map(|(&f, (c, s))| (f, c.hypot(s))).collect()
            }
            None => Vec::new(),
        };
        mags.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
        let mut top: Vec<f64> = mags.iter().take(opts.top_k).map(|m| m.0).collect();
        top.sort_by(f64::total_cmp);
        out.dominant_frequencies = Some(top);
    }
    Ok(out)
}

/// Reference path on cleartext samples.
pub fn plaintext_analysis(x: &[f64], fs: f64, opts: &CompareOptions) -> Result<AnalysisValues, HeError> {
    let mut out = AnalysisValues::default();
    if opts.wants(Analysis::Stats) {
        out.stats = Some(basic_stats(x).map_err(dsp_err)?);
    }
    if opts.needs_peaks() {
        let peaks = pan_tompkins(x, fs);
        if opts.wants(Analysis::Hrv) {
            out.hrv = hrv(&peaks, fs).ok();
        }
        if opts.wants(Analysis::Peaks) {
            out.peaks = Some(peaks);
        }
    }
    if opts.wants(Analysis::Frequency) {
        out.dominant_frequencies = Some(dominant_frequencies(x, fs, opts.top_k).map_err(dsp_err)?);
    }
    Ok(out)
}

/// Run both paths on `window` and compare them.
pub fn compare_pipelines<B: HeBackend>(
    b: &B,
    window: &SignalWindow,
    opts: &CompareOptions,
) -> Result<ComparisonReport, HeError> {
    if window.is_empty() {
        return Err(HeError::InvalidInput("empty window".into()));
    }
    if window.len() > b.slot_count() {
        return Err(HeError::TooManySlots { len: window.len(), slots: b.slot_count() });
    }
    let plain = plaintext_analysis(&window.samples, window.fs, opts)?;
    let ct = b.encrypt(&window.samples)?;
    let res = encrypted_server(b, &ct, window.fs, opts)?;
    let enc = encrypted_finish(b, &ct, &res, opts)?;
    Ok(ComparisonReport::from_values(plain, enc))
}
