//! Plaintext signal analysis.

mod filter;
mod qrs;
mod stats;

use thiserror::Error;

pub use filter::{bandpass, design_bandpass, filtfilt, lfilter, lfilter_zi, FilterCoefficients, FilterSpec};
pub use qrs::{
    derivative, derivative_taps, detect_from_integrated, front_end_taps, integration_width, moving_window_integrate,
    pan_tompkins, qrs_bandpass, FirTaps, REFRACTORY_S,
};
pub use stats::{basic_stats, dominant_frequencies, hrv, magnitude_spectrum, HrvReport, StatsReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DspError {
    #[error("invalid filter spec: {0}")]
    InvalidSpec(String),
    #[error("filter design is numerically unstable")]
    UnstableDesign,
    #[error("input too short: need at least {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("need at least 2 peaks, got {0}")]
    TooFewPeaks(usize),
}
