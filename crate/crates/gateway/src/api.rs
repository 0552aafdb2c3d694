//! JSON API schemas. Every request and response is one JSON object on one
//! line; see `API.md` in this crate for the wire contract.

use ecgpps_core::classifier::ClassLabel;
use ecgpps_core::fhe::{Analysis, AnalysisValues, CompareOptions, ComparisonReport, HeError};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const METHOD_SESSION_LIST: &str = "session.list";
pub const METHOD_ANALYSIS_RUN: &str = "analysis.run";
pub const METHOD_SESSION_CONTROL: &str = "session.control";
pub const METHOD_STREAM_SUBSCRIBE: &str = "stream.subscribe";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<Value>,
    pub method: String,
    #[serde(default)]
    pub params: Value,
}

impl Request {
    pub fn new(method: &str, params: impl Serialize) -> Self {
        Self { id: None, method: method.into(), params: serde_json::to_value(params).expect("serializable params") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<Value>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl Response {
    pub fn success(id: Option<Value>, result: impl Serialize) -> Self {
        Self { id, ok: true, result: Some(serde_json::to_value(result).expect("serializable result")), error: None }
    }

    pub fn failure(id: Option<Value>, err: &ApiError) -> Self {
        Self { id, ok: false, result: None, error: Some(ErrorBody { code: err.code().into(), message: err.to_string() }) }
    }

    /// Decode the result as `T`, or turn an error body back into [`ApiError::Remote`].
    pub fn into_result<T: serde::de::DeserializeOwned>(self) -> Result<T, ApiError> {
        match (self.ok, self.result, self.error) {
            // A null result is dropped on the wire.
            (true, v, None) => serde_json::from_value(v.unwrap_or(Value::Null))
                .map_err(|e| ApiError::BadResponse(e.to_string())),
            (_, _, Some(e)) => Err(ApiError::Remote { code: e.code, message: e.message }),
            (false, _, None) => Err(ApiError::BadResponse("failed response without an error body".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ApiError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("unknown patient `{0}`")]
    UnknownPatient(String),
    #[error("no session matches `{0}`")]
    UnknownSession(String),
    #[error("no records for `{patient_id}` in [{t0}, {t1}]")]
    EmptyRange { patient_id: String, t0: u64, t1: u64 },
    #[error("session keys for the requested records are not available: {0}")]
    KeyUnavailable(String),
    #[error("the gateway has no homomorphic evaluation keys")]
    HeUnavailable,
    #[error("homomorphic evaluation: {0}")]
    He(#[from] HeError),
    #[error("stored data: {0}")]
    Data(String),
    #[error("store: {0}")]
    Store(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
    #[error("transport: {0}")]
    Transport(String),
}

impl ApiError {
    pub fn code(&self) -> &str {
        match self {
            ApiError::BadRequest(_) => "BadRequest",
            ApiError::UnknownMethod(_) => "UnknownMethod",
            ApiError::UnknownPatient(_) => "UnknownPatient",
            ApiError::UnknownSession(_) => "UnknownSession",
            ApiError::EmptyRange { .. } => "EmptyRange",
            ApiError::KeyUnavailable(_) => "KeyUnavailable",
            ApiError::HeUnavailable => "HeUnavailable",
            ApiError::He(HeError::LevelExhausted) => "LevelExhausted",
            ApiError::He(HeError::WindowTooLong { .. } | HeError::TooManySlots { .. }) => "WindowTooLong",
            ApiError::He(_) => "AnalysisFailed",
            ApiError::Data(_) => "DataError",
            ApiError::Store(_) => "StoreError",
            ApiError::BadResponse(_) => "BadResponse",
            ApiError::Remote { code, .. } => code,
            ApiError::Transport(_) => "Transport",
        }
    }
}

/// One display sample with the latest session metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    /// Sample time, ms since the Unix epoch.
    pub t: u64,
    /// Sample from the live path (the record as received).
    pub raw: f64,
    /// The same sample read back from the store and decrypted.
    pub decrypted: f64,
    pub class: Option<ClassLabel>,
    /// Beats per minute from the gateway's own R-peak detection.
    pub pulse: Option<f64>,
    pub latency_ms: Option<f64>,
    /// Samples processed so far in this session.
    pub count: u64,
    /// A lead-off indication arrived since the previous event.
    pub lead_off: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    Plaintext,
    Encrypted,
    Compare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRequest {
    pub patient_id: String,
    pub t0: u64,
    pub t1: u64,
    pub analyses: Vec<Analysis>,
    pub mode: AnalysisMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_max_hz: Option<f64>,
}

impl AnalysisRequest {
    pub fn validate(&self) -> Result<(), ApiError> {
        if self.analyses.is_empty() {
            return Err(ApiError::BadRequest("analyses must not be empty".into()));
        }
        if self.t0 > self.t1 {
            return Err(ApiError::BadRequest(format!("t0 {} is after t1 {}", self.t0, self.t1)));
        }
        if self.top_k == Some(0) {
            return Err(ApiError::BadRequest("top_k must be positive".into()));
        }
        if let Some(f) = self.probe_max_hz {
            if !(f > 0.0) {
                return Err(ApiError::BadRequest("probe_max_hz must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn options(&self) -> CompareOptions {
        let d = CompareOptions::default();
        let mut analyses = self.analyses.clone();
        analyses.sort_by_key(|a| Analysis::ALL.iter().position(|b| b == a));
        analyses.dedup();
        CompareOptions {
            analyses,
            top_k: self.top_k.unwrap_or(d.top_k),
            probe_max_hz: self.probe_max_hz.unwrap_or(d.probe_max_hz),
        }
    }
}

/// Server half of the encrypted path, for the key holder to finish.
/// Ciphertexts are base64 envelopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SealedResults {
    /// Hex SHA-256 fingerprint of the CKKS parameters.
    pub context: String,
    pub n: usize,
    pub fs: f64,
    pub window: String,
    pub mean: Option<String>,
    pub variance: Option<String>,
    pub integrated: Option<String>,
    pub spectrum_freqs: Option<Vec<f64>>,
    pub spectrum: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub patient_id: String,
    pub t0: u64,
    pub t1: u64,
    pub mode: AnalysisMode,
    pub analyses: Vec<Analysis>,
    pub fs: f64,
    pub samples: usize,
    pub records: usize,
    pub plaintext: Option<AnalysisValues>,
    /// Filled when the encrypted path was finished by a key holder.
    pub encrypted: Option<AnalysisValues>,
    pub comparison: Option<ComparisonReport>,
    /// Filled when the encrypted path still awaits the key holder.
    pub sealed: Option<SealedResults>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Start,
    Stop,
    FilterOn,
    FilterOff,
}

/// Targets the given session, or else the most recent session of the patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
    pub action: ControlAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlResult {
    pub session_id: String,
    pub running: bool,
    pub filter_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub patient_id: String,
    /// `preshared` or `ecdh`.
    pub mode: String,
    pub fs: f64,
    pub base_ms: u64,
    pub connected: bool,
    pub running: bool,
    pub filter_enabled: bool,
    pub records: u64,
    pub decoded_samples: u64,
    pub resync_bytes: u64,
    /// Samples that went through the analysis pipeline.
    pub count: u64,
    pub class: Option<ClassLabel>,
    pub pulse: Option<f64>,
    /// Last pulse byte reported by the device itself.
    pub device_pulse: Option<u8>,
    pub latency_ms: Option<f64>,
    pub lead_off: bool,
    pub lead_off_events: u64,
    /// Why the session ended, if it ended abnormally.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientInfo {
    pub patient_id: String,
    pub records: usize,
    pub first_ms: u64,
    pub last_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionList {
    pub sessions: Vec<SessionInfo>,
    pub patients: Vec<PatientInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscribeRequest {
    pub patient_id: String,
}
