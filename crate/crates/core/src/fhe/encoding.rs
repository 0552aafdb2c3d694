//! Canonical embedding between complex slot vectors and real polynomials.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

/// Special FFT over the `5^j mod 2N` orbit, as used by approximate
/// homomorphic schemes. `slots = N/2`.
#[derive(Debug, Clone)]
pub struct Encoder {
    slots: usize,
    m: usize,
    rot_group: Vec<usize>,
    ksi: Vec<Complex64>,
}

fn bit_reverse_permute(v: &mut [Complex64]) {
    let n = v.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            v.swap(i, j);
        }
    }
}

impl Encoder {
    pub fn new(slots: usize) -> Self {
        let m = 4 * slots;
        let mut rot_group = Vec::with_capacity(slots);
        let mut g = 1usize;
        for _ in 0..slots {
            rot_group.push(g);
            g = g * 5 % m;
        }
        let ksi = (0..=m).map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / m as f64)).collect();
        Self { slots, m, rot_group, ksi }
    }

    /// Galois element for a left rotation by `r` slots.
    pub fn galois_element(&self, r: usize) -> usize {
        self.rot_group[r % self.slots]
    }

    fn fft_special(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        bit_reverse_permute(vals);
        let mut len = 2;
        while len <= size {
            let lenh = len >> 1;
            let lenq = len << 2;
            let gap = self.m / lenq;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (self.rot_group[j] % lenq) * gap;
                    let u = vals[i + j];
                    let v = vals[i + j + lenh] * self.ksi[idx];
                    vals[i + j] = u + v;
                    vals[i + j + lenh] = u - v;
                }
            }
            len <<= 1;
        }
    }

    fn fft_special_inv(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        let mut len = size;
        while len >= 2 {
            let lenh = len >> 1;
            let lenq = len << 2;
            let gap = self.m / lenq;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (lenq - self.rot_group[j] % lenq) * gap;
                    let u = vals[i + j] + vals[i + j + lenh];
                    let v = (vals[i + j] - vals[i + j + lenh]) * self.ksi[idx];
                    vals[i + j] = u;
                    vals[i + j + lenh] = v;
                }
            }
            len >>= 1;
        }
        bit_reverse_permute(vals);
        let inv = 1.0 / size as f64;
        for v in vals.iter_mut() {
            *v *= inv;
        }
    }

    /// Slots (zero-padded) to polynomial coefficients multiplied by `scale`,
    /// rounded. Coefficients are returned as `i128` to leave headroom for
    /// large scales.
    pub fn encode(&self, z: &[Complex64], scale: f64) -> Vec<i128> {
        assert!(z.len() <= self.slots);
        let mut vals = vec![Complex64::new(0.0, 0.0); self.slots];
        vals[..z.len()].copy_from_slice(z);
        self.fft_special_inv(&mut vals);
        let mut coeffs = vec![0i128; 2 * self.slots];
        for (i, v) in vals.iter().enumerate() {
            coeffs[i] = (v.re * scale).round() as i128;
            coeffs[i + self.slots] = (v.im * scale).round() as i128;
        }
        coeffs
    }

    pub fn decode(&self, coeffs: &[f64], scale: f64) -> Vec<Complex64> {
        let mut vals: Vec<Complex64> =
            (0..self.slots).map(|i| Complex64::new(coeffs[i] / scale, coeffs[i + self.slots] / scale)).collect();
        self.fft_special(&mut vals);
        vals
    }
}
