//! Approximate homomorphic analytics over encrypted signal windows.
//!
//! [`HeBackend`] is the ciphertext contract. [`Ckks`] is a leveled RNS
//! implementation at toy parameters; [`NullScheme`] is the identity backend
//! used for differential testing. The generic operations in [`analytics`]
//! run on either.

pub mod analytics;
mod ckks;
mod encoding;
mod math;
mod null;

use std::io::{Read, Write};

use rustfft::num_complex::Complex64;
use thiserror::Error;

pub use analytics::{
    compare_pipelines, compare_ratio, dft_projections, encrypted_finish, encrypted_server, he_dft, he_integrated_waveform,
    he_linear_filter, he_mask, he_mean_var, he_square, he_sum, plaintext_analysis, probe_frequencies, Analysis,
    AnalysisValues, CompareOptions, ComparisonReport, EncryptedResults, MetricComparison,
};
pub use ckks::{keygen, CipherVector, Ckks, CkksContext, EvalKeys, KeySet, PublicKey, SecretKey};
pub use null::{NullScheme, NullVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeError {
    #[error("unsupported parameters: {0}")]
    UnsupportedParams(String),
    #[error("multiplicative levels exhausted")]
    LevelExhausted,
    #[error("no rotation key for step {0}")]
    RotationUnsupported(usize),
    #[error("missing {0} key")]
    MissingKey(&'static str),
    #[error("scale mismatch: {a} vs {b}")]
    ScaleMismatch { a: f64, b: f64 },
    #[error("{len} values do not fit in {slots} slots")]
    TooManySlots { len: usize, slots: usize },
    #[error("filter reach does not fit: window {len}, reach {reach}, slots {slots}")]
    WindowTooLong { len: usize, reach: usize, slots: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("ciphertext or key was made under different parameters")]
    ParamsMismatch,
    #[error("malformed envelope: {0}")]
    Envelope(String),
}

impl From<std::io::Error> for HeError {
    fn from(e: std::io::Error) -> Self {
        HeError::Envelope(e.to_string())
    }
}

/// Scheme parameters. `multiplicative_depth` counts ciphertext products;
/// `plain_mult_budget` counts additional plaintext products (FIR, scalar,
/// mask), each of which also consumes one rescale prime.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeParams {
    pub slot_count: usize,
    pub scale_bits: u32,
    pub multiplicative_depth: usize,
    pub plain_mult_budget: usize,
    pub error_budget: f64,
}

impl Default for HeParams {
    fn default() -> Self {
        Self { slot_count: 4096, scale_bits: 40, multiplicative_depth: 2, plain_mult_budget: 2, error_budget: 1e-3 }
    }
}

impl HeParams {
    pub fn validate(&self) -> Result<(), HeError> {
        let bad = |m: String| Err(HeError::UnsupportedParams(m));
        if !self.slot_count.is_power_of_two() || !(8..=16384).contains(&self.slot_count) {
            return bad(format!("slot_count {} must be a power of two in [8, 16384]", self.slot_count));
        }
        if !(30..=45).contains(&self.scale_bits) {
            return bad(format!("scale_bits {} outside [30, 45]", self.scale_bits));
        }
        if self.multiplicative_depth == 0 {
            return bad("multiplicative_depth must be at least 1".into());
        }
        if self.rescale_primes() > 12 {
            return bad("modulus chain longer than 12 primes".into());
        }
        if !(self.error_budget >= 0.0 && self.error_budget.is_finite()) {
            return bad(format!("error_budget {}", self.error_budget));
        }
        Ok(())
    }

    pub fn rescale_primes(&self) -> usize {
        self.multiplicative_depth + self.plain_mult_budget
    }

    pub(crate) fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.slot_count as u32).to_le_bytes())?;
        w.write_all(&self.scale_bits.to_le_bytes())?;
        w.write_all(&(self.multiplicative_depth as u32).to_le_bytes())?;
        w.write_all(&(self.plain_mult_budget as u32).to_le_bytes())?;
        w.write_all(&self.error_budget.to_le_bytes())
    }

    pub(crate) fn read_from(r: &mut impl Read) -> Result<Self, HeError> {
        let mut b = [0u8; 24];
        r.read_exact(&mut b)?;
        let u = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        Ok(Self {
            slot_count: u(0) as usize,
            scale_bits: u(4),
            multiplicative_depth: u(8) as usize,
            plain_mult_budget: u(12) as usize,
            error_budget: f64::from_le_bytes(b[16..24].try_into().unwrap()),
        })
    }
}

/// Plaintext bookkeeping carried by a ciphertext: how many leading slots
/// hold data, and whether slots past that are known to be zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtMeta {
    pub logical_len: usize,
    pub tail_clean: bool,
}

/// Operations a ciphertext backend must provide. Rotations are to the left:
/// slot `i` of the result holds slot `i + r` of the input.
pub trait HeBackend {
    type Ct: Clone;

    fn params(&self) -> &HeParams;

    fn slot_count(&self) -> usize {
        self.params().slot_count
    }

    fn error_budget(&self) -> f64 {
        self.params().error_budget
    }

    fn encrypt(&self, x: &[f64]) -> Result<Self::Ct, HeError>;

    fn encrypt_complex(&self, z: &[Complex64]) -> Result<Self::Ct, HeError>;

    fn decrypt_complex(&self, ct: &Self::Ct) -> Result<Vec<Complex64>, HeError>;

    /// Real parts of the first `logical_len` slots.
    fn decrypt(&self, ct: &Self::Ct) -> Result<Vec<f64>, HeError> {
        let n = self.meta(ct).logical_len;
        Ok(self.decrypt_complex(ct)?.iter().take(n).map(|z| z.re).collect())
    }

    fn meta(&self, ct: &Self::Ct) -> CtMeta;

    fn set_meta(&self, ct: &mut Self::Ct, meta: CtMeta);

    fn logical_len(&self, ct: &Self::Ct) -> usize {
        self.meta(ct).logical_len
    }

    /// Remaining ciphertext-ciphertext multiplications.
    fn level(&self, ct: &Self::Ct) -> usize;

    fn add(&self, a: &Self::Ct, b: &Self::Ct) -> Result<Self::Ct, HeError>;

    fn sub(&self, a: &Self::Ct, b: &Self::Ct) -> Result<Self::Ct, HeError>;

    fn rotate(&self, ct: &Self::Ct, r: usize) -> Result<Self::Ct, HeError>;

    /// Slotwise product with a plaintext vector (zero-padded).
    fn mul_plain(&self, ct: &Self::Ct, pt: &[Complex64]) -> Result<Self::Ct, HeError>;

    fn mul_scalar(&self, ct: &Self::Ct, t: f64) -> Result<Self::Ct, HeError>;

    /// Ciphertext product with relinearization and rescale.
    fn mul(&self, a: &Self::Ct, b: &Self::Ct) -> Result<Self::Ct, HeError>;

    /// `Σ_k w_k ⊙ rotate(ct, r_k)`, one plaintext level.
    fn linear_transform(&self, ct: &Self::Ct, terms: &[(usize, Weight)]) -> Result<Self::Ct, HeError>;

    /// `y[i] = Σ t · x[i + offset]` over cyclic slots, one plaintext level.
    fn fir(&self, ct: &Self::Ct, taps: &[(isize, f64)]) -> Result<Self::Ct, HeError> {
        let s = self.slot_count() as isize;
        let terms: Vec<(usize, Weight)> =
            taps.iter().map(|&(o, t)| (o.rem_euclid(s) as usize, Weight::Scalar(t))).collect();
        self.linear_transform(ct, &terms)
    }
}

/// Plaintext factor applied to one rotated copy in
/// [`HeBackend::linear_transform`].
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Scalar(f64),
    /// Per-slot factors, zero-padded to the slot count.
    Slots(Vec<Complex64>),
}

impl Weight {
    /// Merge terms sharing a rotation. Returns them sorted by rotation.
    pub(crate) fn merge(terms: &[(usize, Weight)], slots: usize) -> Vec<(usize, Weight)> {
        let mut out: std::collections::BTreeMap<usize, Weight> = std::collections::BTreeMap::new();
        for (r, w) in terms {
            let r = r % slots;
            let merged = match (out.remove(&r), w) {
                (None, w) => w.clone(),
                (Some(Weight::Scalar(a)), Weight::Scalar(b)) => Weight::Scalar(a + b),
                (Some(a), b) => {
                    let (a, b) = (a.to_slots(slots), b.to_slots(slots));
                    Weight::Slots(a.iter().zip(&b).map(|(x, y)| x + y).collect())
                }
            };
            out.insert(r, merged);
        }
        out.into_iter().collect()
    }

    pub(crate) fn to_slots(&self, slots: usize) -> Vec<Complex64> {
        match self {
            Weight::Scalar(t) => vec![Complex64::new(*t, 0.0); slots],
            Weight::Slots(v) => {
                let mut out = v.clone();
                out.resize(slots, Complex64::new(0.0, 0.0));
                out
            }
        }
    }
}
