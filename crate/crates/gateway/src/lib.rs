//! ECG gateway: accepts encrypted agent sessions, stores the ciphertext,
//! runs the live detection and classification pipeline, and serves a
//! JSON-lines API for session control, analysis and live streams.
//!
//! - [`link`]: agent to gateway session framing
//! - [`pipeline`]: per-session decode, detect, classify, display events
//! - [`analysis`]: range analysis and the key-holder finishing step
//! - [`server`]: the gateway itself
//! - [`client`]: agent and API clients
//! - [`api`]: JSON schemas
//! - [`table`]: text rendering of reports

pub mod analysis;
pub mod api;
pub mod client;
pub mod link;
pub mod pipeline;
pub mod server;
pub mod table;

use ecgpps_core::classifier::{normalize, synthetic_corpus, BeatSegment, ClassLabel, ClassifierError, CnnModel, Hyperparams};
use ecgpps_core::signal::{synth, SynthProfile};

pub use server::{Gateway, GatewayConfig, GatewayError, ServerHandle};

/// Beats per class, epochs and batch size of the built-in classifier.
pub const DEFAULT_TRAINING: (usize, usize, usize) = (200, 10, 32);

/// Device rates whose beats are added to the training corpus after the
/// same resampling the pipeline applies.
pub const RESAMPLED_TRAINING_RATES: [f64; 2] = [50.0, 125.0];

/// Beats of every class synthesized at `fs` and resampled to `model_fs` the
/// way the live pipeline does it.
pub fn resampled_corpus(per_class: usize, fs: f64, model_fs: f64, seed: u64) -> Result<Vec<BeatSegment>, ClassifierError> {
    let mut out = Vec::new();
    for label in ClassLabel::ALL {
        let mut profile = SynthProfile::single_class(label, 60.0, seed.wrapping_mul(37).wrapping_add(label.index() as u64));
        profile.rr_jitter = 0.02;
        let w = synth(&profile, per_class as f64 + 2.0, fs).map_err(|e| ClassifierError::Dataset(e.to_string()))?;
        let beats = w
            .truth_peaks
            .iter()
            .flatten()
            .filter_map(|&p| pipeline::beat_segment(&w.samples, fs, p, model_fs))
            .take(per_class)
            .map(|mut seg| {
                seg.label = Some(label);
                normalize(&seg)
            });
        out.extend(beats);
    }
    Ok(out)
}

/// Train the default beat classifier: the noise-free synthetic corpus at
/// 360 Hz plus resampled beats from lower device rates.
pub fn train_default_model(seed: u64) -> Result<CnnModel, ClassifierError> {
    let (per_class, epochs, batch) = DEFAULT_TRAINING;
    let mut corpus = synthetic_corpus(per_class, 0.0, 360.0, seed)?;
    for fs in RESAMPLED_TRAINING_RATES {
        corpus.extend(resampled_corpus(per_class, fs, 360.0, seed)?);
    }
    let mut model = CnnModel::new(Hyperparams { seed, ..Hyperparams::default() })?;
    model.train(&corpus, epochs, batch)?;
    Ok(model)
}
