//! Identity backend: "ciphertexts" are the plaintext slots. Level and prime
//! accounting mirror [`super::Ckks`] so depth errors surface identically.

use rustfft::num_complex::Complex64;

use super::{CtMeta, HeBackend, HeError, HeParams, Weight};

#[derive(Debug, Clone, PartialEq)]
pub struct NullVector {
    slots: Vec<Complex64>,
    level: usize,
    primes_left: usize,
    meta: CtMeta,
}

#[derive(Debug, Clone)]
pub struct NullScheme {
    params: HeParams,
}

impl NullScheme {
    pub fn new(params: HeParams) -> Result<Self, HeError> {
        let params = HeParams { error_budget: 0.0, ..params };
        params.validate()?;
        Ok(Self { params })
    }

    fn consume_prime(ct: &NullVector) -> Result<usize, HeError> {
        ct.primes_left.checked_sub(1).ok_or(HeError::LevelExhausted)
    }

    fn zip(&self, a: &NullVector, b: &NullVector, f: impl Fn(Complex64, Complex64) -> Complex64) -> NullVector {
        NullVector {
            slots: a.slots.iter().zip(&b.slots).map(|(&x, &y)| f(x, y)).collect(),
            level: a.level.min(b.level),
            primes_left: a.primes_left.min(b.primes_left),
            meta: CtMeta {
                logical_len: a.meta.logical_len.max(b.meta.logical_len),
                tail_clean: a.meta.tail_clean && b.meta.tail_clean,
            },
        }
    }
}

impl HeBackend for NullScheme {
    type Ct = NullVector;

    fn params(&self) -> &HeParams {
        &self.params
    }

    fn encrypt(&self, x: &[f64]) -> Result<NullVector, HeError> {
        let z: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.encrypt_complex(&z)
    }

    fn encrypt_complex(&self, z: &[Complex64]) -> Result<NullVector, HeError> {
        let n = self.params.slot_count;
        if z.len() > n {
            return Err(HeError::TooManySlots { len: z.len(), slots: n });
        }
        let mut slots = vec![Complex64::new(0.0, 0.0); n];
        slots[..z.len()].copy_from_slice(z);
        Ok(NullVector {
            slots,
            level: self.params.multiplicative_depth,
            primes_left: self.params.rescale_primes(),
            meta: CtMeta { logical_len: z.len(), tail_clean: true },
        })
    }

    fn decrypt_complex(&self, ct: &NullVector) -> Result<Vec<Complex64>, HeError> {
        Ok(ct.slots.clone())
    }

    fn meta(&self, ct: &NullVector) -> CtMeta {
        ct.meta
    }

    fn set_meta(&self, ct: &mut NullVector, meta: CtMeta) {
        ct.meta = meta;
    }

    fn level(&self, ct: &NullVector) -> usize {
        ct.level
    }

    fn add(&self, a: &NullVector, b: &NullVector) -> Result<NullVector, HeError> {
        Ok(self.zip(a, b, |x, y| x + y))
    }

    fn sub(&self, a: &NullVector, b: &NullVector) -> Result<NullVector, HeError> {
        Ok(self.zip(a, b, |x, y| x - y))
    }

    fn rotate(&self, ct: &NullVector, r: usize) -> Result<NullVector, HeError> {
        let mut out = ct.clone();
        out.slots.rotate_left(r % self.params.slot_count);
        Ok(out)
    }

    fn mul_plain(&self, ct: &NullVector, pt: &[Complex64]) -> Result<NullVector, HeError> {
        let primes_left = Self::consume_prime(ct)?;
        let zero = Complex64::new(0.0, 0.0);
        let slots = ct.slots.iter().enumerate().map(|(i, &x)| x * pt.get(i).copied().unwrap_or(zero)).collect();
        Ok(NullVector { slots, primes_left, ..ct.clone() })
    }

    fn mul_scalar(&self, ct: &NullVector, t: f64) -> Result<NullVector, HeError> {
        let primes_left = Self::consume_prime(ct)?;
        Ok(NullVector { slots: ct.slots.iter().map(|&x| x * t).collect(), primes_left, ..ct.clone() })
    }

    fn mul(&self, a: &NullVector, b: &NullVector) -> Result<NullVector, HeError> {
        if a.level.min(b.level) == 0 {
            return Err(HeError::LevelExhausted);
        }
        let mut out = self.zip(a, b, |x, y| x * y);
        out.primes_left = Self::consume_prime(&out)?;
        out.level -= 1;
        out.meta.tail_clean = a.meta.tail_clean || b.meta.tail_clean;
        Ok(out)
    }

    fn linear_transform(&self, ct: &NullVector, terms: &[(usize, Weight)]) -> Result<NullVector, HeError> {
        let primes_left = Self::consume_prime(ct)?;
        let n = self.params.slot_count;
        let mut slots = vec![Complex64::new(0.0, 0.0); n];
        for (r, w) in Weight::merge(terms, n) {
            let w = w.to_slots(n);
            for (i, acc) in slots.iter_mut().enumerate() {
                *acc += w[i] * ct.slots[(i + r) % n];
            }
        }
        Ok(NullVector { slots, primes_left, ..ct.clone() })
    }
}
