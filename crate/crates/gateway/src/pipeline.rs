//! Per-session real-time processing.
//!
//! Every record arrives twice: as opened in flight (the live path) and as
//! read back from the store and opened again (the stored path). Live
//! samples feed a rolling buffer; every hop the buffer is optionally
//! bandpassed, R-peaks are detected and the newest complete beat is
//! classified. Display events pair the two paths sample for sample.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use ecgpps_core::classifier::{normalize, BeatSegment, ClassLabel, CnnModel, SEGMENT_CENTER, SEGMENT_LEN};
use ecgpps_core::dsp::{design_bandpass, filtfilt, hrv, pan_tompkins, FilterCoefficients, FilterSpec};
use ecgpps_core::signal::Calibration;
use ecgpps_core::wire::{Decoder, FrameEvent};
use thiserror::Error;

use crate::api::StreamEvent;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Rolling buffer length, seconds.
    pub buffer_s: f64,
    /// Analysis hop, seconds.
    pub hop_s: f64,
    /// Display events per second of signal.
    pub events_per_s: f64,
    /// Band of the optional display filter, Hz. The upper edge is clamped
    /// below Nyquist.
    pub filter_band: (f64, f64),
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { buffer_s: 10.0, hop_s: 2.0, events_per_s: 25.0, filter_band: (0.5, 40.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("live path decoded {live} samples but the stored path {stored}")]
    PathMismatch { live: usize, stored: usize },
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Metrics {
    pub class: Option<ClassLabel>,
    pub pulse: Option<f64>,
    pub latency_ms: Option<f64>,
    pub device_pulse: Option<u8>,
}

pub struct SessionPipeline {
    fs: f64,
    calibration: Calibration,
    base_ms: u64,
    model: Option<Arc<CnnModel>>,
    filter: Option<FilterCoefficients>,
    live: Decoder,
    stored: Decoder,
    buffer: VecDeque<f64>,
    capacity: usize,
    hop: usize,
    since_hop: usize,
    events_per_s: f64,
    next_event: u64,
    decoded: u64,
    processed: u64,
    hops: u64,
    running: bool,
    filter_enabled: bool,
    lead_off_pending: bool,
    lead_off_in_hop: bool,
    lead_off_now: bool,
    lead_off_events: u64,
    metrics: Metrics,
}

impl SessionPipeline {
    pub fn new(
        cfg: &PipelineConfig,
        fs: f64,
        calibration: Calibration,
        base_ms: u64,
        model: Option<Arc<CnnModel>>,
    ) -> Result<Self, PipelineError> {
        if !(cfg.hop_s > 0.0 && cfg.buffer_s >= cfg.hop_s && cfg.events_per_s > 0.0 && fs > 0.0) {
            return Err(PipelineError::Config(format!("{cfg:?} at {fs} Hz")));
        }
        let (lo, hi) = cfg.filter_band;
        let filter = design_bandpass(&FilterSpec::new(2, lo, hi.min(0.45 * fs), fs)).ok();
        Ok(Self {
            fs,
            calibration,
            base_ms,
            model,
            filter,
            live: Decoder::new(),
            stored: Decoder::new(),
            buffer: VecDeque::new(),
            capacity: ((cfg.buffer_s * fs).round() as usize).max(1),
            hop: ((cfg.hop_s * fs).round() as usize).max(1),
            since_hop: 0,
            events_per_s: cfg.events_per_s,
            next_event: 0,
            decoded: 0,
            processed: 0,
            hops: 0,
            running: true,
            filter_enabled: false,
            lead_off_pending: false,
            lead_off_in_hop: false,
            lead_off_now: false,
            lead_off_events: 0,
            metrics: Metrics::default(),
        })
    }

    pub fn set_running(&mut self, on: bool) {
        self.running = on;
    }

    pub fn running(&self) -> bool {
        self.running
    }

    pub fn set_filter(&mut self, on: bool) {
        self.filter_enabled = on;
    }

    pub fn filter_enabled(&self) -> bool {
        self.filter_enabled
    }

    pub fn metrics(&self) -> Metrics {
        self.metrics
    }

    /// Samples decoded from the live path, processed or not.
    pub fn decoded(&self) -> u64 {
        self.decoded
    }

    /// Samples that went through the analysis buffer.
    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn hops(&self) -> u64 {
        self.hops
    }

    /// Bytes the live decoder skipped while resynchronising.
    pub fn resync_bytes(&self) -> u64 {
        self.live.stats().total()
    }

    pub fn lead_off(&self) -> bool {
        self.lead_off_now
    }

    pub fn lead_off_events(&self) -> u64 {
        self.lead_off_events
    }

    fn sample_ms(&self, index: u64) -> u64 {
        self.base_ms + (index as f64 * 1000.0 / self.fs).round() as u64
    }

    fn event_sample(&self, j: u64) -> u64 {
        (j as f64 * self.fs / self.events_per_s).round() as u64
    }

    /// Process one record's plaintext from both paths. `ingest_at` is when
    /// the record arrived; it anchors the latency of any hop it completes.
    pub fn ingest(&mut self, live: &[u8], stored: &[u8], ingest_at: Instant) -> Result<Vec<StreamEvent>, PipelineError> {
        let mut live_events = self.live.feed(live);
        live_events.extend(self.live.flush());
        let mut stored_events = self.stored.feed(stored);
        stored_events.extend(self.stored.flush());
        let stored_samples: Vec<u8> = stored_events
            .into_iter()
            .filter_map(|e| match e {
                FrameEvent::WaveSamples(s) => Some(s),
                _ => None,
            })
            .flatten()
            .collect();
        let live_count: usize =
            live_events.iter().map(|e| if let FrameEvent::WaveSamples(s) = e { s.len() } else { 0 }).sum();
        if live_count != stored_samples.len() {
            return Err(PipelineError::PathMismatch { live: live_count, stored: stored_samples.len() });
        }

        let mut out = Vec::new();
        let mut stored_iter = stored_samples.into_iter();
        for ev in live_events {
            match ev {
                FrameEvent::WaveSamples(samples) => {
                    for raw in samples {
                        let stored = stored_iter.next().expect("counts checked");
                        self.sample(raw, stored, ingest_at, &mut out);
                    }
                }
                FrameEvent::Pulse(p) => self.metrics.device_pulse = Some(p),
                ev if ev.is_lead_off() => {
                    self.lead_off_pending = true;
                    self.lead_off_in_hop = true;
                    self.lead_off_now = true;
                    self.lead_off_events += 1;
                }
                FrameEvent::Info(_) => {}
            }
        }
        Ok(out)
    }

    fn sample(&mut self, raw: u8, stored: u8, ingest_at: Instant, out: &mut Vec<StreamEvent>) {
        let index = self.decoded;
        self.decoded += 1;
        self.lead_off_now = false;
        if !self.running {
            return;
        }
        self.processed += 1;
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(self.calibration.to_amplitude(raw));
        self.since_hop += 1;
        if self.since_hop >= self.hop {
            self.since_hop = 0;
            self.run_hop(ingest_at);
        }
        while self.event_sample(self.next_event) < index {
            self.next_event += 1;
        }
        if self.event_sample(self.next_event) == index {
            self.next_event += 1;
            out.push(StreamEvent {
                t: self.sample_ms(index),
                raw: self.calibration.to_amplitude(raw),
                decrypted: self.calibration.to_amplitude(stored),
                class: self.metrics.class,
                pulse: self.metrics.pulse,
                latency_ms: self.metrics.latency_ms,
                count: self.processed,
                lead_off: std::mem::take(&mut self.lead_off_pending),
            });
        }
    }

    fn run_hop(&mut self, ingest_at: Instant) {
        let window: Vec<f64> = self.buffer.iter().copied().collect();
        let x = match (&self.filter, self.filter_enabled) {
            (Some(coeffs), true) => filtfilt(coeffs, &window).unwrap_or(window),
            _ => window,
        };
        let peaks = pan_tompkins(&x, self.fs);
        self.metrics.pulse = hrv(&peaks, self.fs).ok().filter(|h| h.mean_rr > 0.0).map(|h| 60.0 / h.mean_rr);
        // A lead-off inside the window makes its beats untrustworthy.
        if !self.lead_off_in_hop {
            if let Some(model) = &self.model {
                let newest = peaks.iter().rev().find_map(|&p| beat_segment(&x, self.fs, p, model.sample_rate));
                if let Some(seg) = newest {
                    if let Ok((label, _)) = model.predict(&normalize(&seg)) {
                        self.metrics.class = Some(label);
                    }
                }
            }
        }
        self.lead_off_in_hop = false;
        self.hops += 1;
        self.metrics.latency_ms = Some(ingest_at.elapsed().as_secs_f64() * 1e3);
    }
}

/// A classifier-length segment around `peak`, linearly resampled from `fs`
/// to `model_fs`. `None` if the beat does not fit inside `x`.
pub fn beat_segment(x: &[f64], fs: f64, peak: usize, model_fs: f64) -> Option<BeatSegment> {
    let step = fs / model_fs;
    let first = peak as f64 - SEGMENT_CENTER as f64 * step;
    let last = peak as f64 + (SEGMENT_LEN - 1 - SEGMENT_CENTER) as f64 * step;
    if first < 0.0 || last > (x.len() - 1) as f64 {
        return None;
    }
    let samples = (0..SEGMENT_LEN)
        .map(|k| {
            let pos = first + k as f64 * step;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            if frac == 0.0 || i + 1 >= x.len() {
                x[i]
            } else {
                x[i] * (1.0 - frac) + x[i + 1] * frac
            }
        })
        .collect();
    let mut seg = BeatSegment::new(samples, None).ok()?;
    seg.center_index = peak;
    Some(seg)
}
