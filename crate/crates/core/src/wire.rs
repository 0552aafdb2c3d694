//! Marker-byte ECG stream codec.
//!
//! The device stream is a sequence of marker-prefixed runs:
//!
//! | byte   | meaning                                  |
//! |--------|------------------------------------------|
//! | `0xF8` | wave samples follow until the next marker |
//! | `0xFA` | one pulse byte follows                   |
//! | `0xFB` | one info byte follows (`0x11` = lead off) |
//!
//! Wave samples are restricted to `0x00..=0xF7` so a marker can never be
//! mistaken for data inside a run. The byte after `0xFA`/`0xFB` is data
//! regardless of its value.

use thiserror::Error;

pub const WAVE_MARKER: u8 = 0xF8;
pub const PULSE_MARKER: u8 = 0xFA;
pub const INFO_MARKER: u8 = 0xFB;
pub const INFO_LEAD_OFF: u8 = 0x11;

/// Largest legal wave sample value.
pub const MAX_SAMPLE: u8 = 0xF7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameEvent {
    WaveSamples(Vec<u8>),
    Pulse(u8),
    Info(u8),
}

impl FrameEvent {
    pub fn is_lead_off(&self) -> bool {
        matches!(self, FrameEvent::Info(INFO_LEAD_OFF))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("wave sample {value:#04x} at event {event} is out of range (must be < 0xF8)")]
    SampleOutOfRange { event: usize, value: u8 },
    #[error("wave event {0} carries no samples")]
    EmptyWaveRun(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderMode {
    #[default]
    Idle,
    InWave,
    ExpectPulse,
    ExpectInfo,
}

/// Counters for bytes the decoder had to skip while resynchronising.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ResyncStats {
    /// Data bytes seen in `Idle` before any marker.
    pub unexpected_data: u64,
    /// Bytes in `0xF9` or `0xFC..=0xFF` seen where a marker was legal.
    pub unknown_markers: u64,
}

impl ResyncStats {
    pub fn total(&self) -> u64 {
        self.unexpected_data + self.unknown_markers
    }
}

/// Incremental decoder. Feed it arbitrary chunks; it keeps partial runs
/// between calls.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Decoder {
    mode: DecoderMode,
    pending: Vec<u8>,
    stats: ResyncStats,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mode(&self) -> DecoderMode {
        self.mode
    }

    pub fn pending_samples(&self) -> &[u8] {
        &self.pending
    }

    pub fn stats(&self) -> ResyncStats {
        self.stats
    }

    /// Decode `bytes`, appending completed events to `out`.
    pub fn feed_into(&mut self, bytes: &[u8], out: &mut Vec<FrameEvent>) {
        for &byte in bytes {
            match self.mode {
                DecoderMode::ExpectPulse => {
                    out.push(FrameEvent::Pulse(byte));
                    self.mode = DecoderMode::Idle;
                }
                DecoderMode::ExpectInfo => {
                    out.push(FrameEvent::Info(byte));
                    self.mode = DecoderMode::Idle;
                }
                DecoderMode::Idle | DecoderMode::InWave => match byte {
                    WAVE_MARKER => {
                        self.close_run(out);
                        self.mode = DecoderMode::InWave;
                    }
                    PULSE_MARKER => {
                        self.close_run(out);
                        self.mode = DecoderMode::ExpectPulse;
                    }
                    INFO_MARKER => {
                        self.close_run(out);
                        self.mode = DecoderMode::ExpectInfo;
                    }
                    0xF9 | 0xFC..=0xFF => {
                        self.close_run(out);
                        self.stats.unknown_markers += 1;
                        self.mode = DecoderMode::Idle;
                    }
                    data if self.mode == DecoderMode::InWave => self.pending.push(data),
                    _ => self.stats.unexpected_data += 1,
                },
            }
        }
    }

    pub fn feed(&mut self, bytes: &[u8]) -> Vec<FrameEvent> {
        let mut out = Vec::new();
        self.feed_into(bytes, &mut out);
        out
    }

    /// Terminate a pending wave run. The decoder stays `InWave`, so bytes
    /// arriving after a flush continue the stream as a new run.
    pub fn flush(&mut self) -> Option<FrameEvent> {
        if self.pending.is_empty() {
            None
        } else {
            Some(FrameEvent::WaveSamples(std::mem::take(&mut self.pending)))
        }
    }

    fn close_run(&mut self, out: &mut Vec<FrameEvent>) {
        if let Some(ev) = self.flush() {
            out.push(ev);
        }
    }
}

/// One-shot decode of a complete byte sequence, flushing the final run.
pub fn decode_all(bytes: &[u8]) -> Vec<FrameEvent> {
    let mut dec = Decoder::new();
    let mut out = dec.feed(bytes);
    out.extend(dec.flush());
    out
}

/// Encode events to stream bytes. Every wave event gets its own `0xF8`, so
/// adjacent runs survive a round trip unmerged.
pub fn encode(events: &[FrameEvent]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(events.len() * 4);
    for (i, ev) in events.iter().enumerate() {
        match ev {
            FrameEvent::WaveSamples(samples) => {
                if samples.is_empty() {
                    return Err(WireError::EmptyWaveRun(i));
                }
                if let Some(&value) = samples.iter().find(|&&s| s > MAX_SAMPLE) {
                    return Err(WireError::SampleOutOfRange { event: i, value });
                }
                out.push(WAVE_MARKER);
                out.extend_from_slice(samples);
            }
            FrameEvent::Pulse(bpm) => out.extend_from_slice(&[PULSE_MARKER, *bpm]),
            FrameEvent::Info(code) => out.extend_from_slice(&[INFO_MARKER, *code]),
        }
    }
    Ok(out)
}
