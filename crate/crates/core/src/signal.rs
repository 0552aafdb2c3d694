//! Patient-side signal production: a template-based synthetic ECG generator
//! with ground truth, and conversion of sample windows into the timed
//! marker-byte stream the device would emit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::classifier::ClassLabel;
use crate::wire::{self, FrameEvent, INFO_LEAD_OFF, MAX_SAMPLE};

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("sample {index} ({value}) quantizes outside 0..=247")]
    QuantizationOverflow { index: usize, value: f64 },
    #[error("profile line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A contiguous run of samples with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    pub samples: Vec<f64>,
    /// Sampling rate in Hz.
    pub fs: f64,
    /// Timestamp of `samples[0]`, ms since epoch.
    pub t0_ms: u64,
    pub truth_peaks: Option<Vec<usize>>,
    pub truth_labels: Option<Vec<ClassLabel>>,
}

impl SignalWindow {
    pub fn new(samples: Vec<f64>, fs: f64, t0_ms: u64) -> Self {
        Self { samples, fs, t0_ms, truth_peaks: None, truth_labels: None }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.fs > 0.0) {
            return Err(SignalError::InvalidRequest("fs must be positive".into()));
        }
        if let Some(peaks) = &self.truth_peaks {
            if peaks.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SignalError::InvalidRequest("truth peaks not increasing".into()));
            }
            if peaks.last().is_some_and(|&p| p >= self.samples.len()) {
                return Err(SignalError::InvalidRequest("truth peak out of range".into()));
            }
            if let Some(labels) = &self.truth_labels {
                if labels.len() != peaks.len() {
                    return Err(SignalError::InvalidRequest("labels not aligned to peaks".into()));
                }
            }
        } else if self.truth_labels.is_some() {
            return Err(SignalError::InvalidRequest("labels without peaks".into()));
        }
        Ok(())
    }
}

/// Generator settings. `class_mix` maps each label to its draw probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthProfile {
    pub bpm: f64,
    pub class_mix: BTreeMap<ClassLabel, f64>,
    /// Standard deviation of additive white noise, mV.
    pub noise_std: f64,
    /// Frequency of sinusoidal baseline wander; 0 disables it.
    pub baseline_wander_hz: f64,
    /// Peak-to-peak RR jitter as a fraction of the nominal RR, at most 0.02.
    pub rr_jitter: f64,
    pub seed: u64,
}

/// Amplitude of the baseline wander sinusoid, mV.
pub const BASELINE_WANDER_AMP: f64 = 0.15;

/// Delay of the first R-peak, seconds (at least half an RR interval).
const MIN_LEAD_S: f64 = 0.5;
/// Template support around the R-peak, seconds.
const TEMPLATE_BEFORE_S: f64 = 0.35;
const TEMPLATE_AFTER_S: f64 = 0.55;

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            bpm: 60.0,
            class_mix: BTreeMap::from([(ClassLabel::N, 1.0)]),
            noise_std: 0.0,
            baseline_wander_hz: 0.0,
            rr_jitter: 0.0,
            seed: 0,
        }
    }
}

impl SynthProfile {
    pub fn single_class(label: ClassLabel, bpm: f64, seed: u64) -> Self {
        Self { bpm, class_mix: BTreeMap::from([(label, 1.0)]), seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        let bad = |m: &str| Err(SignalError::InvalidProfile(m.to_string()));
        if !(20.0..=300.0).contains(&self.bpm) {
            return bad("bpm must lie in [20, 300]");
        }
        if self.class_mix.is_empty() {
            return bad("class_mix is empty");
        }
        if self.class_mix.values().any(|&p| !(0.0..=1.0).contains(&p) || p.is_nan()) {
            return bad("class probabilities must lie in [0, 1]");
        }
        let total: f64 = self.class_mix.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad("class probabilities must sum to 1");
        }
        if !(self.noise_std >= 0.0) || !(self.baseline_wander_hz >= 0.0) {
            return bad("noise_std and baseline_wander_hz must be non-negative");
        }
        if !(0.0..=0.02).contains(&self.rr_jitter) {
            return bad("rr_jitter must lie in [0, 0.02]");
        }
        Ok(())
    }

    fn draw_label(&self, rng: &mut impl Rng) -> ClassLabel {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = ClassLabel::N;
        for (&label, &p) in &self.class_mix {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = label;
            if u < acc {
                return label;
            }
        }
        last
    }
}

/// One Gaussian bump of a beat template: amplitude (mV), centre offset from
/// the R-peak (s), width (s).
#[derive(Debug, Clone, Copy)]
struct Wave(f64, f64, f64);

/// P-QRS-T templates, one per class.
///
/// * `N`: upright P, narrow QRS, upright T.
/// * `L`: P present, broad notched R without Q, inverted T.
/// * `R`: P present, rSR' pattern (second positive deflection after S).
/// * `A`: premature ectopic P (inverted, closer to QRS), normal QRS.
/// * `V`: no P, wide tall R with deep S, large inverted T.
fn template(label: ClassLabel) -> &'static [Wave] {
    match label {
        ClassLabel::N => &[
            Wave(0.12, -0.20, 0.025),
            Wave(-0.10, -0.028, 0.008),
            Wave(1.00, 0.0, 0.011),
            Wave(-0.22, 0.028, 0.009),
            Wave(0.30, 0.28, 0.045),
        ],
        ClassLabel::L => &[
            Wave(0.12, -0.22, 0.025),
            Wave(0.80, 0.0, 0.028),
            Wave(0.25, 0.045, 0.015),
            Wave(-0.28, 0.30, 0.050),
        ],
        ClassLabel::R => &[
            Wave(0.12, -0.20, 0.025),
            Wave(0.85, 0.0, 0.010),
            Wave(-0.45, 0.030, 0.010),
            Wave(0.45, 0.065, 0.014),
            Wave(0.20, 0.32, 0.050),
        ],
        ClassLabel::A => &[
            Wave(-0.14, -0.12, 0.018),
            Wave(-0.08, -0.028, 0.008),
            Wave(0.95, 0.0, 0.011),
            Wave(-0.20, 0.028, 0.009),
            Wave(0.28, 0.26, 0.040),
        ],
        ClassLabel::V => &[
            Wave(1.40, 0.0, 0.032),
            Wave(-0.55, 0.075, 0.030),
            Wave(-0.45, 0.32, 0.060),
        ],
    }
}

fn template_value(label: ClassLabel, dt: f64) -> f64 {
    template(label)
        .iter()
        .map(|&Wave(amp, mu, sigma)| amp * (-(dt - mu).powi(2) / (2.0 * sigma * sigma)).exp())
        .sum()
}

/// Sampled template over the fixed support, plus the index of its maximum.
/// Beats are placed so that the sampled maximum lands on the truth index.
fn sampled_template(label: ClassLabel, fs: f64) -> (Vec<f64>, usize) {
    let before = (TEMPLATE_BEFORE_S * fs).ceil() as usize;
    let after = (TEMPLATE_AFTER_S * fs).ceil() as usize;
    let values: Vec<f64> =
        (0..before + after + 1).map(|k| template_value(label, (k as f64 - before as f64) / fs)).collect();
    let argmax = values
        .iter()
        .enumerate()
        .fold(0, |best, (k, &v)| if v > values[best] { k } else { best });
    (values, argmax)
}

/// Render a single clean beat of `label` centred on sample `center` of a
/// buffer of `len` samples.
pub fn beat_template(label: ClassLabel, fs: f64, len: usize, center: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    add_beat(&mut out, label, fs, center);
    out
}

fn add_beat(out: &mut [f64], label: ClassLabel, fs: f64, center: usize) {
    let (values, argmax) = sampled_template(label, fs);
    for (k, v) in values.iter().enumerate() {
        let idx = center as isize + k as isize - argmax as isize;
        if idx >= 0 && (idx as usize) < out.len() {
            out[idx as usize] += v;
        }
    }
}

/// Synthesize `duration_s` seconds at `fs` Hz.
pub fn synth(profile: &SynthProfile, duration_s: f64, fs: f64) -> Result<SignalWindow, SignalError> {
    profile.validate()?;
    if !(duration_s > 0.0) || !(fs > 0.0) {
        return Err(SignalError::InvalidRequest("duration and fs must be positive".into()));
    }
    let len = (duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let rr = 60.0 / profile.bpm;

    let mut peaks = Vec::new();
    let mut labels = Vec::new();
    let mut t = MIN_LEAD_S.max(0.5 * rr);
    let mut last: Option<usize> = None;
    while t + TEMPLATE_AFTER_S.min(0.5) <= duration_s {
        let idx = (t * fs).round() as usize;
        if idx >= len {
            break;
        }
        if last.is_none_or(|l| idx > l) {
            peaks.push(idx);
            labels.push(profile.draw_label(&mut rng));
            last = Some(idx);
        }
        let jitter = if profile.rr_jitter > 0.0 {
            rng.gen_range(-profile.rr_jitter..=profile.rr_jitter)
        } else {
            0.0
        };
        t += rr * (1.0 + jitter);
    }

    let mut samples = vec![0.0; len];
    for (&p, &label) in peaks.iter().zip(&labels) {
        add_beat(&mut samples, label, fs, p);
    }
    if profile.baseline_wander_hz > 0.0 {
        let w = 2.0 * std::f64::consts::PI * profile.baseline_wander_hz / fs;
        for (i, s) in samples.iter_mut().enumerate() {
            *s += BASELINE_WANDER_AMP * (w * i as f64).sin();
        }
    }
    if profile.noise_std > 0.0 {
        let normal = Normal::new(0.0, profile.noise_std)
            .map_err(|e| SignalError::InvalidProfile(e.to_string()))?;
        for s in samples.iter_mut() {
            *s += normal.sample(&mut rng);
        }
    }

    Ok(SignalWindow { samples, fs, t0_ms: 0, truth_peaks: Some(peaks), truth_labels: Some(labels) })
}

/// Affine map between raw device units and amplitude: `amp = gain * raw + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub gain: f64,
    pub offset: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { gain: 1.0, offset: 0.0 }
    }
}

impl Calibration {
    /// Calibration that puts `[-1, 1.47]` mV into the byte range with 10 uV steps.
    pub const ECG_MV: Calibration = Calibration { gain: 0.01, offset: -1.0 };

    pub fn to_amplitude(&self, raw: u8) -> f64 {
        self.gain * raw as f64 + self.offset
    }

    pub fn quantize(&self, amplitude: f64) -> Option<u8> {
        let raw = ((amplitude - self.offset) / self.gain).round();
        (0.0..=MAX_SAMPLE as f64).contains(&raw).then_some(raw as u8)
    }
}

/// Quantize a whole window. Fails on the first out-of-range sample.
pub fn quantize(samples: &[f64], cal: Calibration) -> Result<Vec<u8>, SignalError> {
    samples
        .iter()
        .enumerate()
        .map(|(index, &value)| cal.quantize(value).ok_or(SignalError::QuantizationOverflow { index, value }))
        .collect()
}

/// A chunk of stream bytes due at `at_ms` after stream start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedChunk {
    pub at_ms: u64,
    pub bytes: Vec<u8>,
    /// Number of wave samples carried in this chunk.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub calibration: Calibration,
    /// Pulse event period, seconds; 0 disables pulses.
    pub pulse_period_s: f64,
    /// Wave samples per read chunk.
    pub chunk_samples: usize,
    /// Times (s from window start) at which an `Info(LeadOff)` is injected.
    pub lead_off_at_s: Vec<f64>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { calibration: Calibration::default(), pulse_period_s: 1.0, chunk_samples: 10, lead_off_at_s: Vec::new() }
    }
}

/// Pulse estimate reported by the device: rounded mean BPM over the last
/// five RR intervals completed before `sample`.
pub fn smoothed_bpm(peaks: &[usize], fs: f64, sample: usize) -> Option<u8> {
    let seen = peaks.partition_point(|&p| p <= sample);
    if seen < 2 {
        return None;
    }
    let recent = &peaks[seen.saturating_sub(6)..seen];
    let intervals = recent.len() - 1;
    let mean_rr = (recent[recent.len() - 1] - recent[0]) as f64 / intervals as f64 / fs;
    Some((60.0 / mean_rr).round().clamp(0.0, 255.0) as u8)
}

/// Convert a window into timed stream chunks.
///
/// Wave runs are cut every `chunk_samples`; each chunk's timestamp is the
/// time of its last sample. Pulse and lead-off events are interleaved at
/// their sample positions.
pub fn stream(window: &SignalWindow, cfg: &StreamConfig) -> Result<Vec<TimedChunk>, SignalError> {
    window.validate()?;
    if cfg.chunk_samples == 0 {
        return Err(SignalError::InvalidRequest("chunk_samples must be positive".into()));
    }
    let raw = quantize(&window.samples, cfg.calibration)?;
    let fs = window.fs;

    // (sample position, event) for non-wave events, sorted by position.
    let mut extras: Vec<(usize, FrameEvent)> = cfg
        .lead_off_at_s
        .iter()
        .map(|&t| (((t * fs).round() as usize).min(raw.len()), FrameEvent::Info(INFO_LEAD_OFF)))
        .collect();
    if cfg.pulse_period_s > 0.0 {
        if let Some(peaks) = &window.truth_peaks {
            let step = cfg.pulse_period_s * fs;
            let mut k = 1;
            while (k as f64 * step).round() as usize <= raw.len() {
                let pos = (k as f64 * step).round() as usize;
                if let Some(bpm) = smoothed_bpm(peaks, fs, pos) {
                    extras.push((pos, FrameEvent::Pulse(bpm)));
                }
                k += 1;
            }
        }
    }
    extras.sort_by_key(|(pos, _)| *pos);

    let ms_at = |sample: usize| ((sample as f64) * 1000.0 / fs).round() as u64;
    let mut chunks = Vec::new();
    let mut extra = extras.into_iter().peekable();
    let mut start = 0;
    while start < raw.len() {
        let end = (start + cfg.chunk_samples).min(raw.len());
        let mut events = Vec::new();
        let mut run_start = start;
        while let Some((pos, _)) = extra.peek() {
            if *pos >= end && end < raw.len() {
                break;
            }
            let (pos, ev) = extra.next().expect("peeked");
            let pos = pos.clamp(run_start, end);
            if pos > run_start {
                events.push(FrameEvent::WaveSamples(raw[run_start..pos].to_vec()));
                run_start = pos;
            }
            events.push(ev);
        }
        if end > run_start {
            events.push(FrameEvent::WaveSamples(raw[run_start..end].to_vec()));
        }
        let bytes = wire::encode(&events).expect("quantized samples are in range");
        chunks.push(TimedChunk { at_ms: ms_at(end), bytes, samples: end - start });
        start = end;
    }
    Ok(chunks)
}

/// Split a recorded raw byte stream into chunks paced at `fs` assuming one
/// byte per sample.
pub fn replay_chunks(bytes: &[u8], chunk_len: usize, fs: f64) -> Vec<TimedChunk> {
    let chunk_len = chunk_len.max(1);
    let mut at = 0usize;
    bytes
        .chunks(chunk_len)
        .map(|c| {
            at += c.len();
            TimedChunk {
                at_ms: (at as f64 * 1000.0 / fs).round() as u64,
                bytes: c.to_vec(),
                samples: c.iter().filter(|&&b| b <= MAX_SAMPLE).count(),
            }
        })
        .collect()
}

/// Agent profile file: `key = value` lines, `#` comments.
///
/// Keys: `bpm`, `class_mix` (e.g. `N:0.8, V:0.2`), `noise_std`,
/// `baseline_wander_hz`, `rr_jitter`, `seed`, `gain`, `offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentProfile {
    pub synth: SynthProfile,
    pub calibration: Calibration,
}

impl Default for AgentProfile {
    fn default() -> Self {
        Self { synth: SynthProfile::default(), calibration: Calibration::ECG_MV }
    }
}

impl FromStr for AgentProfile {
    type Err = SignalError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut profile = AgentProfile::default();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| SignalError::Parse { line: line_no, msg };
            let (key, value) =
                line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "bpm" => profile.synth.bpm = num(value)?,
                "noise_std" => profile.synth.noise_std = num(value)?,
                "baseline_wander_hz" => profile.synth.baseline_wander_hz = num(value)?,
                "rr_jitter" => profile.synth.rr_jitter = num(value)?,
                "gain" => profile.calibration.gain = num(value)?,
                "offset" => profile.calibration.offset = num(value)?,
                "seed" => {
                    profile.synth.seed = value.parse().map_err(|e| err(format!("seed: {e}")))?
                }
                "class_mix" => {
                    let mut mix = BTreeMap::new();
                    for item in value.split(',') {
                        let (label, p) = item
                            .split_once(':')
                            .ok_or_else(|| err(format!("class_mix item `{}`", item.trim())))?;
                        let label: ClassLabel =
                            label.trim().parse().map_err(|e| err(format!("{e}")))?;
                        mix.insert(label, num(p.trim())?);
                    }
                    profile.synth.class_mix = mix;
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        profile.synth.validate()?;
        Ok(profile)
    }
}

impl fmt::Display for AgentProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.synth;
        writeln!(f, "bpm = {}", s.bpm)?;
        let mix: Vec<String> = s.class_mix.iter().map(|(l, p)| format!("{l}:{p}")).collect();
        writeln!(f, "class_mix = {}", mix.join(", "))?;
        writeln!(f, "noise_std = {}", s.noise_std)?;
        writeln!(f, "baseline_wander_hz = {}", s.baseline_wander_hz)?;
        writeln!(f, "rr_jitter = {}", s.rr_jitter)?;
        writeln!(f, "seed = {}", s.seed)?;
        writeln!(f, "gain = {}", self.calibration.gain)?;
        writeln!(f, "offset = {}", self.calibration.offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::decode_all;

    #[test]
    fn sixty_bpm_spacing() {
        let w = synth(&SynthProfile::default(), 10.0, 50.0).unwrap();
        let peaks = w.truth_peaks.unwrap();
        assert!(peaks.len() >= 9);
        assert!(peaks.windows(2).all(|p| p[1] - p[0] == 50));
    }

    #[test]
    fn single_class_mix() {
        let w = synth(&SynthProfile::single_class(ClassLabel::N, 75.0, 3), 20.0, 360.0).unwrap();
        assert!(w.truth_labels.unwrap().iter().all(|&l| l == ClassLabel::N));
    }

    #[test]
    fn rr_of_0_85_s() {
        let profile = SynthProfile { bpm: 60.0 / 0.85, ..SynthProfile::default() };
        let w = synth(&profile, 30.0, 360.0).unwrap();
        let p = w.truth_peaks.unwrap();
        let mean = (p[p.len() - 1] - p[0]) as f64 / (p.len() - 1) as f64 / 360.0;
        assert!((mean - 0.85).abs() <= 1.0 / 360.0, "{mean}");
    }

    #[test]
    fn deterministic_for_seed() {
        let mut profile = SynthProfile::default();
        profile.class_mix = BTreeMap::from([(ClassLabel::N, 0.5), (ClassLabel::V, 0.5)]);
        profile.noise_std = 0.05;
        profile.rr_jitter = 0.02;
        profile.seed = 42;
        let a = synth(&profile, 12.0, 360.0).unwrap();
        let b = synth(&profile, 12.0, 360.0).unwrap();
        assert_eq!(a, b);
        profile.seed = 43;
        assert_ne!(a, synth(&profile, 12.0, 360.0).unwrap());
    }

    #[test]
    fn rejects_bad_profiles() {
        let mut p = SynthProfile::default();
        p.bpm = 10.0;
        assert!(matches!(synth(&p, 1.0, 50.0), Err(SignalError::InvalidProfile(_))));
        let mut p = SynthProfile::default();
        p.class_mix = BTreeMap::from([(ClassLabel::N, 0.5), (ClassLabel::L, 0.4)]);
        assert!(matches!(synth(&p, 1.0, 50.0), Err(SignalError::InvalidProfile(_))));
        assert!(synth(&SynthProfile::default(), 0.0, 50.0).is_err());
    }

    #[test]
    fn templates_peak_at_r() {
        for label in ClassLabel::ALL {
            let fs = 360.0;
            let beat = beat_template(label, fs, 400, 200);
            let argmax = beat
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, 200, "{label}");
        }
    }

    #[test]
    fn constant_window_streams_constant_runs() {
        let w = SignalWindow::new(vec![0.0; 25], 50.0, 0);
        let cfg = StreamConfig {
            calibration: Calibration { gain: 1.0, offset: -64.0 },
            pulse_period_s: 0.0,
            chunk_samples: 10,
            lead_off_at_s: vec![],
        };
        let chunks = stream(&w, &cfg).unwrap();
        assert_eq!(chunks.len(), 3);
        for c in &chunks {
            assert_eq!(c.bytes[0], 0xF8);
            assert!(c.bytes[1..].iter().all(|&b| b == 0x40));
        }
        assert_eq!(chunks.iter().map(|c| c.samples).sum::<usize>(), 25);
    }

    #[test]
    fn pulse_tracks_truth_rate() {
        let w = synth(&SynthProfile::default(), 30.0, 50.0).unwrap();
        let cfg = StreamConfig { calibration: Calibration::ECG_MV, ..StreamConfig::default() };
        let bytes: Vec<u8> = stream(&w, &cfg).unwrap().into_iter().flat_map(|c| c.bytes).collect();
        let pulses: Vec<u8> = decode_all(&bytes)
            .into_iter()
            .filter_map(|e| if let FrameEvent::Pulse(p) = e { Some(p) } else { None })
            .collect();
        assert!(pulses.len() > 20);
        assert!(pulses.iter().all(|&p| (58..=62).contains(&p)), "{pulses:?}");
    }

    #[test]
    fn lead_off_injected_once_at_position() {
        let w = synth(&SynthProfile::default(), 5.0, 50.0).unwrap();
        let cfg = StreamConfig {
            calibration: Calibration::ECG_MV,
            pulse_period_s: 0.0,
            chunk_samples: 7,
            lead_off_at_s: vec![2.0],
        };
        let bytes: Vec<u8> = stream(&w, &cfg).unwrap().into_iter().flat_map(|c| c.bytes).collect();
        let positions: Vec<usize> = bytes.windows(2).enumerate().filter(|(_, p)| p == &[0xFB, 0x11]).map(|(i, _)| i).collect();
        assert_eq!(positions.len(), 1);
        // samples before the injection point
        let events = decode_all(&bytes[..positions[0]]);
        let before: usize = events
            .iter()
            .map(|e| if let FrameEvent::WaveSamples(s) = e { s.len() } else { 0 })
            .sum();
        assert_eq!(before, 100);
    }

    #[test]
    fn stream_round_trip_reproduces_quantized_samples() {
        let mut p = SynthProfile::default();
        p.class_mix = BTreeMap::from([(ClassLabel::V, 0.3), (ClassLabel::N, 0.7)]);
        p.noise_std = 0.02;
        p.seed = 9;
        let w = synth(&p, 8.0, 360.0).unwrap();
        let cfg = StreamConfig { calibration: Calibration::ECG_MV, lead_off_at_s: vec![3.3], ..StreamConfig::default() };
        let bytes: Vec<u8> = stream(&w, &cfg).unwrap().into_iter().flat_map(|c| c.bytes).collect();
        let decoded: Vec<u8> = decode_all(&bytes)
            .into_iter()
            .flat_map(|e| if let FrameEvent::WaveSamples(s) = e { s } else { vec![] })
            .collect();
        assert_eq!(decoded, quantize(&w.samples, Calibration::ECG_MV).unwrap());
    }

    #[test]
    fn quantization_overflow_reported() {
        let w = SignalWindow::new(vec![0.0, 5.0], 50.0, 0);
        let cfg = StreamConfig { calibration: Calibration::ECG_MV, ..StreamConfig::default() };
        assert!(matches!(stream(&w, &cfg), Err(SignalError::QuantizationOverflow { index: 1, .. })));
    }

    #[test]
    fn profile_file_round_trip() {
        let text = "# demo\nbpm = 72\nclass_mix = N:0.6, V:0.4\nnoise_std = 0.01\nseed = 5\ngain = 0.02\noffset=-2\n";
        let p: AgentProfile = text.parse().unwrap();
        assert_eq!(p.synth.bpm, 72.0);
        assert_eq!(p.synth.class_mix[&ClassLabel::V], 0.4);
        assert_eq!(p.calibration, Calibration { gain: 0.02, offset: -2.0 });
        let again: AgentProfile = p.to_string().parse().unwrap();
        assert_eq!(again, p);
        assert!(matches!("bpm: 3".parse::<AgentProfile>(), Err(SignalError::Parse { line: 1, .. })));
        assert!("colour = red".parse::<AgentProfile>().is_err());
    }
}
