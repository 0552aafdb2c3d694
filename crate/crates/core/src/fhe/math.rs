//! Word-sized modular arithmetic, prime search and the negacyclic NTT.

/// A prime modulus below 2^62 with Barrett constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modulus {
    pub q: u64,
    bits: u32,
    mu: u64,
    /// `floor(2^64 / q)`, for reducing single words.
    ratio: u64,
}

impl Modulus {
    pub fn new(q: u64) -> Self {
        assert!(q > 2 && q < (1 << 62), "modulus out of range");
        let bits = 64 - q.leading_zeros();
        let mu = ((1u128 << (2 * bits)) / q as u128) as u64;
        let ratio = ((1u128 << 64) / q as u128) as u64;
        Self { q, bits, mu, ratio }
    }

    /// Barrett reduction, valid for `x < q^2`.
    #[inline]
    pub fn reduce_u128(&self, x: u128) -> u64 {
        let xs = (x >> (self.bits - 1)) as u64;
        let est = ((xs as u128 * self.mu as u128) >> (self.bits + 1)) as u64;
        let mut r = (x as u64).wrapping_sub(est.wrapping_mul(self.q));
        while r >= self.q {
            r -= self.q;
        }
        r
    }

    #[inline]
    pub fn reduce_u64(&self, x: u64) -> u64 {
        let est = ((x as u128 * self.ratio as u128) >> 64) as u64;
        let mut r = x - est * self.q;
        while r >= self.q {
            r -= self.q;
        }
        r
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        self.reduce_u128(a as u128 * b as u128)
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        let s = a + b;
        if s >= self.q {
            s - self.q
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            a + self.q - b
        }
    }

    #[inline]
    pub fn pow(&self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1u64;
        base %= self.q;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    pub fn inv(&self, a: u64) -> u64 {
        self.pow(a, self.q - 2)
    }

    /// Signed integer to residue.
    #[inline]
    pub fn from_i64(&self, v: i64) -> u64 {
        let r = self.reduce_u64(v.unsigned_abs());
        if v < 0 && r != 0 {
            self.q - r
        } else {
            r
        }
    }

    pub fn from_i128(&self, v: i128) -> u64 {
        match i64::try_from(v) {
            Ok(w) => self.from_i64(w),
            Err(_) => v.rem_euclid(self.q as i128) as u64,
        }
    }

    /// Residue to the symmetric range `(-q/2, q/2]`.
    #[inline]
    pub fn centered(&self, a: u64) -> i64 {
        if a > self.q / 2 {
            a as i64 - self.q as i64
        } else {
            a as i64
        }
    }

    /// Precomputed `floor(w * 2^64 / q)` for [`Modulus::mul_shoup`].
    #[inline]
    pub fn shoup(&self, w: u64) -> u64 {
        (((w as u128) << 64) / self.q as u128) as u64
    }

    #[inline]
    pub fn mul_shoup(&self, a: u64, w: u64, w_shoup: u64) -> u64 {
        let est = ((a as u128 * w_shoup as u128) >> 64) as u64;
        let r = a.wrapping_mul(w).wrapping_sub(est.wrapping_mul(self.q));
        if r >= self.q {
            r - self.q
        } else {
            r
        }
    }
}

fn mul_mod_u64(a: u64, b: u64, m: u64) -> u64 {
    (a as u128 * b as u128 % m as u128) as u64
}

fn pow_mod_u64(mut b: u64, mut e: u64, m: u64) -> u64 {
    let mut acc = 1u64;
    b %= m;
    while e > 0 {
        if e & 1 == 1 {
            acc = mul_mod_u64(acc, b, m);
        }
        b = mul_mod_u64(b, b, m);
        e >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for &p in &BASES {
        if n % p == 0 {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'outer: for &a in &BASES {
        let mut x = pow_mod_u64(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod_u64(x, x, n);
            if x == n - 1 {
                continue 'outer;
            }
        }
        return false;
    }
    true
}

/// Distinct primes `q ≡ 1 (mod step)` close to `target`, alternating
/// above and below it so that their product stays near `target^count`.
pub fn primes_near(target: u64, step: u64, count: usize, exclude: &[u64]) -> Vec<u64> {
    let base = target / step;
    let mut out = Vec::with_capacity(count);
    let mut up = base + 1;
    let mut down = base;
    let mut take_up = true;
    while out.len() < count {
        let candidate = if take_up {
            let c = up * step + 1;
            up += 1;
            c
        } else {
            let c = down * step + 1;
            down -= 1;
            c
        };
        if is_prime(candidate) && !exclude.contains(&candidate) && !out.contains(&candidate) {
            out.push(candidate);
            take_up = !take_up;
        }
    }
    out
}

/// Largest prime `q ≡ 1 (mod step)` not above `limit` and not excluded.
pub fn prime_below(limit: u64, step: u64, exclude: &[u64]) -> u64 {
    let mut k = (limit - 1) / step;
    loop {
        let c = k * step + 1;
        if is_prime(c) && !exclude.contains(&c) {
            return c;
        }
        k -= 1;
    }
}

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

/// Negacyclic NTT tables for `Z_q[X]/(X^n + 1)`.
#[derive(Debug, Clone)]
pub struct NttTable {
    pub m: Modulus,
    n: usize,
    psi_rev: Vec<u64>,
    psi_rev_shoup: Vec<u64>,
    psi_inv_rev: Vec<u64>,
    psi_inv_rev_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

impl NttTable {
    pub fn new(q: u64, n: usize) -> Self {
        let m = Modulus::new(q);
        let two_n = 2 * n as u64;
        assert_eq!((q - 1) % two_n, 0, "q must be 1 mod 2n");
        let psi = (2..)
            .map(|g| m.pow(g, (q - 1) / two_n))
            .find(|&c| m.pow(c, n as u64) == q - 1)
            .expect("primitive 2n-th root exists");
        let psi_inv = m.inv(psi);
        let bits = n.trailing_zeros();
        let mut psi_rev = vec![0; n];
        let mut psi_inv_rev = vec![0; n];
        let (mut p, mut pi) = (1u64, 1u64);
        let mut pows = vec![0; n];
        let mut inv_pows = vec![0; n];
        for i in 0..n {
            pows[i] = p;
            inv_pows[i] = pi;
            p = m.mul(p, psi);
            pi = m.mul(pi, psi_inv);
        }
        for i in 0..n {
            psi_rev[i] = pows[bit_reverse(i, bits)];
            psi_inv_rev[i] = inv_pows[bit_reverse(i, bits)];
        }
        let psi_rev_shoup = psi_rev.iter().map(|&w| m.shoup(w)).collect();
        let psi_inv_rev_shoup = psi_inv_rev.iter().map(|&w| m.shoup(w)).collect();
        let n_inv = m.inv(n as u64);
        Self { m, n, psi_rev, psi_rev_shoup, psi_inv_rev, psi_inv_rev_shoup, n_inv, n_inv_shoup: m.shoup(n_inv) }
    }

    /// Coefficients to evaluations (bit-reversed order). Butterflies keep
    /// values lazily in `[0, 4q)` and reduce once at the end.
    pub fn forward(&self, a: &mut [u64]) {
        assert_eq!(a.len(), self.n);
        let q = self.m.q;
        let two_q = 2 * q;
        let mut t = self.n;
        let mut m = 1;
        while m < self.n {
            t >>= 1;
            for (i, block) in a.chunks_exact_mut(2 * t).enumerate() {
                let w = self.psi_rev[m + i];
                let ws = self.psi_rev_shoup[m + i];
                let (lo, hi) = block.split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let mut u = *x;
                    if u >= two_q {
                        u -= two_q;
                    }
                    let v = lazy_shoup(*y, w, ws, q);
                    *x = u + v;
                    *y = u + two_q - v;
                }
            }
            m <<= 1;
        }
        for v in a.iter_mut() {
            let mut r = *v;
            if r >= two_q {
                r -= two_q;
            }
            if r >= q {
                r -= q;
            }
            *v = r;
        }
    }

    pub fn inverse(&self, a: &mut [u64]) {
        assert_eq!(a.len(), self.n);
        let q = self.m.q;
        let two_q = 2 * q;
        let mut t = 1;
        let mut m = self.n;
        while m > 1 {
            let h = m >> 1;
            for (i, block) in a.chunks_exact_mut(2 * t).enumerate() {
                let w = self.psi_inv_rev[h + i];
                let ws = self.psi_inv_rev_shoup[h + i];
                let (lo, hi) = block.split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let (u, v) = (*x, *y);
                    let mut s = u + v;
                    if s >= two_q {
                        s -= two_q;
                    }
                    *x = s;
                    *y = lazy_shoup(u + two_q - v, w, ws, q);
                }
            }
            t <<= 1;
            m = h;
        }
        for v in a.iter_mut() {
            *v = self.m.mul_shoup(*v, self.n_inv, self.n_inv_shoup);
        }
    }
}

/// `a * w mod q` in `[0, 2q)`.
#[inline(always)]
fn lazy_shoup(a: u64, w: u64, ws: u64, q: u64) -> u64 {
    let est = ((a as u128 * ws as u128) >> 64) as u64;
    a.wrapping_mul(w).wrapping_sub(est.wrapping_mul(q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn primality() {
        let primes = [2u64, 3, 97, 7681, 12289, 1_000_000_007, (1 << 61) - 1];
        for p in primes {
            assert!(is_prime(p), "{p}");
        }
        for c in [1u64, 4, 561, 1_000_000_008, (1 << 61) + 1, 3_215_031_751] {
            assert!(!is_prime(c), "{c}");
        }
    }

    #[test]
    fn barrett_and_shoup_agree_with_u128() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for q in [97u64, 12289, prime_below(1 << 40, 16384, &[]), prime_below(1 << 61, 16384, &[])] {
            let m = Modulus::new(q);
            for _ in 0..2000 {
                let a = rng.gen_range(0..q);
                let b = rng.gen_range(0..q);
                let expect = (a as u128 * b as u128 % q as u128) as u64;
                assert_eq!(m.mul(a, b), expect);
                assert_eq!(m.mul_shoup(a, b, m.shoup(b)), expect);
                let w: u64 = rng.gen();
                assert_eq!(m.reduce_u64(w), w % q);
                let v: i64 = rng.gen();
                assert_eq!(m.from_i64(v), v.rem_euclid(q as i64) as u64);
            }
            for v in [0i64, 1, -1, i64::MIN, i64::MAX, q as i64, -(q as i64)] {
                assert_eq!(m.from_i64(v), (v as i128).rem_euclid(q as i128) as u64, "{v}");
            }
            let big = -(1i128 << 100) + 7;
            assert_eq!(m.from_i128(big), big.rem_euclid(q as i128) as u64);
            assert_eq!(m.mul(m.inv(5), 5), 1);
        }
    }

    #[test]
    fn prime_search() {
        let ps = primes_near(1 << 40, 16384, 4, &[]);
        assert_eq!(ps.len(), 4);
        for p in &ps {
            assert!(is_prime(*p) && p % 16384 == 1);
            assert!((*p as f64 / (1u64 << 40) as f64 - 1.0).abs() < 1e-3);
        }
    }

    fn negacyclic_schoolbook(a: &[u64], b: &[u64], m: &Modulus) -> Vec<u64> {
        let n = a.len();
        let mut out = vec![0u64; n];
        for i in 0..n {
            for j in 0..n {
                let p = m.mul(a[i], b[j]);
                let k = i + j;
                if k < n {
                    out[k] = m.add(out[k], p);
                } else {
                    out[k - n] = m.sub(out[k - n], p);
                }
            }
        }
        out
    }

    #[test]
    fn ntt_multiplies_negacyclically() {
        let n = 64;
        let q = prime_below(1 << 50, 2 * n as u64, &[]);
        let t = NttTable::new(q, n);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<u64> = (0..n).map(|_| rng.gen_range(0..q)).collect();
        let b: Vec<u64> = (0..n).map(|_| rng.gen_range(0..q)).collect();
        let expect = negacyclic_schoolbook(&a, &b, &t.m);
        let (mut fa, mut fb) = (a.clone(), b.clone());
        t.forward(&mut fa);
        t.forward(&mut fb);
        let mut prod: Vec<u64> = fa.iter().zip(&fb).map(|(x, y)| t.m.mul(*x, *y)).collect();
        t.inverse(&mut prod);
        assert_eq!(prod, expect);
        t.inverse(&mut fa);
        assert_eq!(fa, a);
    }
}
