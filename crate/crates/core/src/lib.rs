//! Core of a privacy-preserving ECG monitoring pipeline.
//!
//! * [`wire`]: marker-byte device stream codec.
//! * [`signal`]: synthetic ECG generation and stream emission.
//! * [`dsp`]: bandpass design, zero-phase filtering, QRS detection, statistics.
//! * [`classifier`]: beat segmentation and a small CNN.
//! * [`channel`]: authenticated encryption of records and key agreement.
//! * [`fhe`]: approximate homomorphic analytics on signal windows.
//! * [`store`]: append-only record log with a patient/time index.

pub mod channel;
pub mod classifier;
pub mod dsp;
pub mod fhe;
pub mod signal;
pub mod store;
pub mod wire;
