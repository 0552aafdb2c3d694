//! Butterworth bandpass design and zero-phase IIR filtering.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::DspError;

/// Bandpass request. Cutoffs and sampling rate are in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub order: usize,
    pub lowcut: f64,
    pub highcut: f64,
    pub fs: f64,
}

impl FilterSpec {
    pub fn new(order: usize, lowcut: f64, highcut: f64, fs: f64) -> Self {
        Self { order, lowcut, highcut, fs }
    }

    pub fn nyquist(&self) -> f64 {
        0.5 * self.fs
    }

    /// Cutoffs as fractions of the Nyquist frequency.
    pub fn normalized(&self) -> (f64, f64) {
        (self.lowcut / self.nyquist(), self.highcut / self.nyquist())
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.order == 0 {
            return Err(DspError::InvalidSpec("order must be positive".into()));
        }
        if !(self.fs > 0.0) || !(self.lowcut > 0.0) || !(self.lowcut < self.highcut) || !(self.highcut < self.nyquist()) {
            return Err(DspError::InvalidSpec(format!(
                "need 0 < lowcut < highcut < fs/2, got {} / {} at fs {}",
                self.lowcut, self.highcut, self.fs
            )));
        }
        Ok(())
    }
}

/// Transfer function `b(z)/a(z)` with `a[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoefficients {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl FilterCoefficients {
    /// Complex frequency response at `freq` Hz.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
        let eval = |c: &[f64]| {
            c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &v| acc * z_inv + v)
        };
        eval(&self.b) / eval(&self.a)
    }

    pub fn gain_db(&self, freq: f64, fs: f64) -> f64 {
        20.0 * self.response(freq, fs).norm().log10()
    }

    /// Roots of the denominator polynomial.
    pub fn poles(&self) -> Vec<Complex64> {
        poly_roots(&self.a)
    }

    /// Number of extra samples `filtfilt` reflects at each edge.
    pub fn pad_len(&self) -> usize {
        3 * (self.a.len().max(self.b.len()) - 1)
    }
}

/// Digital Butterworth bandpass: analog prototype, lowpass-to-bandpass
/// transform at pre-warped edges, then bilinear transform.
pub fn design_bandpass(spec: &FilterSpec) -> Result<FilterCoefficients, DspError> {
    spec.validate()?;
    let n = spec.order;
    let (low, high) = spec.normalized();

    // Pre-warp with a design sampling rate of 2 (normalized frequencies).
    const FS: f64 = 2.0;
    let warp = |w: f64| 2.0 * FS * (PI * w / FS).tan();
    let (wl, wh) = (warp(low), warp(high));
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();

    let proto: Vec<Complex64> = (0..n)
        .map(|k| {
            let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect();

    // Lowpass → bandpass: each prototype pole splits in two; n zeros at s = 0.
    let mut poles = Vec::with_capacity(2 * n);
    for p in &proto {
        let half = p * (bw / 2.0);
        let disc = (half * half - w0 * w0).sqrt();
        poles.push(half + disc);
        poles.push(half - disc);
    }
    let mut gain = bw.powi(n as i32);

    // Bilinear transform.
    let fs2 = Complex64::new(2.0 * FS, 0.0);
    let zeros_z: Vec<Complex64> = std::iter::repeat_n(Complex64::new(1.0, 0.0), n)
        .chain(std::iter::repeat_n(Complex64::new(-1.0, 0.0), n))
        .collect();
    let poles_z: Vec<Complex64> = poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    // Analog zeros at the origin contribute (fs2 - 0)^n to the numerator product.
    let num = fs2.powu(n as u32);
    let den = poles.iter().fold(Complex64::new(1.0, 0.0), |acc, p| acc * (fs2 - p));
    gain *= (num / den).re;

    if poles_z.iter().any(|p| p.norm() >= 1.0) {
        return Err(DspError::UnstableDesign);
    }

    let b: Vec<f64> = poly_from_roots(&zeros_z).iter().map(|c| c.re * gain).collect();
    let a: Vec<f64> = poly_from_roots(&poles_z).iter().map(|c| c.re).collect();
    let coeffs = FilterCoefficients { b, a };
    // Expanding the product can drift the roots for extreme specs.
    if coeffs.poles().iter().any(|p| p.norm() >= 1.0 || !p.norm().is_finite()) {
        return Err(DspError::UnstableDesign);
    }
    Ok(coeffs)
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &v) in c.iter().enumerate() {
            next[i] += v;
            next[i + 1] -= v * r;
        }
        c = next;
    }
    c
}

/// Durand–Kerner iteration on a monic-normalised polynomial given highest
/// power first.
fn poly_roots(coeffs: &[f64]) -> Vec<Complex64> {
    let lead = coeffs.iter().position(|&c| c != 0.0).unwrap_or(coeffs.len());
    let c: Vec<f64> = coeffs[lead..].iter().map(|v| v / coeffs[lead]).collect();
    let deg = c.len().saturating_sub(1);
    if deg == 0 {
        return Vec::new();
    }
    let seed = Complex64::new(0.4, 0.9);
    let mut roots: Vec<Complex64> = (0..deg).map(|k| seed.powu(k as u32)).collect();
    let eval = |z: Complex64| c.iter().fold(Complex64::new(0.0, 0.0), |acc, &v| acc * z + v);
    for _ in 0..2000 {
        let mut delta: f64 = 0.0;
        for i in 0..deg {
            let mut denom = Complex64::new(1.0, 0.0);
            for j in 0..deg {
                if i != j {
                    denom *= roots[i] - roots[j];
                }
            }
            let step = eval(roots[i]) / denom;
            roots[i] -= step;
            delta = delta.max(step.norm());
        }
        if delta < 1e-14 {
            break;
        }
    }
    roots
}

/// Steady-state initial conditions of [`lfilter`] for a unit step input.
pub fn lfilter_zi(coeffs: &FilterCoefficients) -> Vec<f64> {
    let (b, a) = normalized_pair(coeffs);
    let k = b.len() - 1;
    let sum_a: f64 = a.iter().sum();
    if k == 0 || sum_a.abs() < 1e-300 {
        return vec![0.0; k];
    }
    let dc = b.iter().sum::<f64>() / sum_a;
    let mut zi = vec![0.0; k];
    let mut acc = 0.0;
    for i in (0..k).rev() {
        acc += b[i + 1] - a[i + 1] * dc;
        zi[i] = acc;
    }
    zi
}

fn normalized_pair(coeffs: &FilterCoefficients) -> (Vec<f64>, Vec<f64>) {
    let len = coeffs.a.len().max(coeffs.b.len());
    let a0 = coeffs.a[0];
    let mut b: Vec<f64> = coeffs.b.iter().map(|v| v / a0).collect();
    let mut a: Vec<f64> = coeffs.a.iter().map(|v| v / a0).collect();
    b.resize(len, 0.0);
    a.resize(len, 0.0);
    (b, a)
}

/// Direct-form II transposed filter with optional initial state.
pub fn lfilter(coeffs: &FilterCoefficients, x: &[f64], zi: Option<&[f64]>) -> Vec<f64> {
    let (b, a) = normalized_pair(coeffs);
    let k = b.len() - 1;
    let mut z = zi.map_or_else(|| vec![0.0; k], |s| s.to_vec());
    z.resize(k, 0.0);
    let mut y = Vec::with_capacity(x.len());
    for &xn in x {
        let yn = b[0] * xn + z.first().copied().unwrap_or(0.0);
        for i in 0..k {
            let next = if i + 1 < k { z[i + 1] } else { 0.0 };
            z[i] = b[i + 1] * xn - a[i + 1] * yn + next;
        }
        y.push(yn);
    }
    y
}

/// Zero-phase filtering: odd extension of `pad_len` samples at both ends,
/// steady-state initial conditions, forward pass, backward pass.
pub fn filtfilt(coeffs: &FilterCoefficients, x: &[f64]) -> Result<Vec<f64>, DspError> {
    let edge = coeffs.pad_len();
    if x.len() <= edge {
        return Err(DspError::InputTooShort { needed: edge + 1, got: x.len() });
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * edge);
    ext.extend((1..=edge).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=edge).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = lfilter_zi(coeffs);
    let scaled = |s: f64| zi.iter().map(|v| v * s).collect::<Vec<_>>();
    let mut y = lfilter(coeffs, &ext, Some(&scaled(ext[0])));
    y.reverse();
    let mut y = lfilter(coeffs, &y, Some(&scaled(y[0])));
    y.reverse();
    Ok(y[edge..edge + n].to_vec())
}

/// Design and apply in one step.
pub fn bandpass(x: &[f64], spec: &FilterSpec) -> Result<Vec<f64>, DspError> {
    filtfilt(&design_bandpass(spec)?, x)
}
