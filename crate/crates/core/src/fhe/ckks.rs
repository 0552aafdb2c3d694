//! Leveled approximate homomorphic encryption over `Z_Q[X]/(X^N + 1)`
//! with an RNS modulus chain, hybrid key switching and slot rotations.
//!
//! Parameters are sized for a desk-scale demonstration. They have not been
//! reviewed against lattice-estimator tables and must not protect real data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use sha2::{Digest, Sha256};

use super::encoding::Encoder;
use super::math::{prime_below, primes_near, NttTable};
use super::{CtMeta, HeBackend, HeError, HeParams, Weight};

const ERROR_STD: f64 = 3.2;
const Q0_BITS: u32 = 60;
const SPECIAL_BITS: u32 = 61;

type Rns = Vec<Vec<u64>>;

/// Moduli, NTT tables and encoder derived from [`HeParams`].
#[derive(Debug)]
pub struct CkksContext {
    params: HeParams,
    n: usize,
    encoder: Encoder,
    /// `q_0 .. q_L` followed by the special prime.
    tables: Vec<NttTable>,
    fingerprint: [u8; 32],
    /// NTT-domain index maps for power-of-two left rotations, keyed by step.
    galois_maps: BTreeMap<usize, Vec<u32>>,
}

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

impl CkksContext {
    pub fn new(params: HeParams) -> Result<Arc<Self>, HeError> {
        params.validate()?;
        let n = 2 * params.slot_count;
        let step = 2 * n as u64;
        let q0 = prime_below(1 << Q0_BITS, step, &[]);
        let mut moduli = vec![q0];
        moduli.extend(primes_near(1 << params.scale_bits, step, params.rescale_primes(), &[q0]));
        let special = prime_below(1 << SPECIAL_BITS, step, &moduli);
        moduli.push(special);

        let mut h = Sha256::new();
        h.update(b"ecgpps-ckks-v1");
        h.update((params.slot_count as u64).to_le_bytes());
        h.update(params.scale_bits.to_le_bytes());
        h.update((params.multiplicative_depth as u64).to_le_bytes());
        h.update((params.plain_mult_budget as u64).to_le_bytes());
        for q in &moduli {
            h.update(q.to_le_bytes());
        }
        let fingerprint = h.finalize().into();

        let encoder = Encoder::new(params.slot_count);
        let bits = n.trailing_zeros();
        let mut galois_maps = BTreeMap::new();
        let mut r = 1;
        while r < params.slot_count {
            let g = encoder.galois_element(r);
            let map = (0..n)
                .map(|i| {
                    let e = 2 * bit_reverse(i, bits) + 1;
                    let e2 = e * g % (2 * n);
                    bit_reverse((e2 - 1) / 2, bits) as u32
                })
                .collect();
            galois_maps.insert(r, map);
            r <<= 1;
        }
        let tables = moduli.iter().map(|&q| NttTable::new(q, n)).collect();
        Ok(Arc::new(Self { params, n, encoder, tables, fingerprint, galois_maps }))
    }

    pub fn params(&self) -> &HeParams {
        &self.params
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn ring_degree(&self) -> usize {
        self.n
    }

    /// `q_0 .. q_L, P`.
    pub fn moduli(&self) -> Vec<u64> {
        self.tables.iter().map(|t| t.m.q).collect()
    }

    fn num_q(&self) -> usize {
        self.tables.len() - 1
    }

    fn special(&self) -> usize {
        self.tables.len() - 1
    }

    fn default_scale(&self) -> f64 {
        (1u64 << self.params.scale_bits) as f64
    }

    fn signed_to_ntt(&self, coeffs: &[i64], prime: usize) -> Vec<u64> {
        let t = &self.tables[prime];
        let mut v: Vec<u64> = coeffs.iter().map(|&c| t.m.from_i64(c)).collect();
        t.forward(&mut v);
        v
    }

    fn encode_rns(&self, z: &[Complex64], scale: f64, primes: usize) -> Result<Rns, HeError> {
        if z.len() > self.params.slot_count {
            return Err(HeError::TooManySlots { len: z.len(), slots: self.params.slot_count });
        }
        if z.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(HeError::InvalidInput("non-finite value".into()));
        }
        let coeffs = self.encoder.encode(z, scale);
        Ok((0..primes)
            .map(|j| {
                let t = &self.tables[j];
                let mut v: Vec<u64> = coeffs.iter().map(|&c| t.m.from_i128(c)).collect();
                t.forward(&mut v);
                v
            })
            .collect())
    }

    fn sample_ternary(&self, rng: &mut impl Rng) -> Vec<i64> {
        (0..self.n).map(|_| rng.gen_range(-1i64..=1)).collect()
    }

    fn sample_error(&self, rng: &mut impl Rng) -> Vec<i64> {
        let normal = Normal::new(0.0, ERROR_STD).expect("valid deviation");
        (0..self.n).map(|_| normal.sample(rng).round() as i64).collect()
    }

    fn expand_uniform(&self, seed: [u8; 32], digits: usize, primes: &[usize]) -> Vec<Rns> {
        let mut rng = ChaCha20Rng::from_seed(seed);
        (0..digits)
            .map(|_| {
                primes
                    .iter()
                    .map(|&p| {
                        let q = self.tables[p].m.q;
                        (0..self.n).map(|_| rng.gen_range(0..q)).collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn key_primes(&self) -> Vec<usize> {
        (0..self.tables.len()).collect()
    }

    /// Residues of `b_i = -a_i s + e_i + [t = i] P s'` for every digit `i`.
    fn make_switch_key(&self, s: &Rns, s_prime: &Rns, rng: &mut impl Rng) -> SwitchKey {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let primes = self.key_primes();
        let a = self.expand_uniform(seed, self.num_q(), &primes);
        let p = self.tables[self.special()].m.q;
        let b = (0..self.num_q())
            .map(|i| {
                let e = self.sample_error(rng);
                primes
                    .iter()
                    .map(|&t| {
                        let m = &self.tables[t].m;
                        let e_t = self.signed_to_ntt(&e, t);
                        let p_mod = p % m.q;
                        (0..self.n)
                            .map(|k| {
                                let mut v = m.sub(e_t[k], m.mul(a[i][t][k], s[t][k]));
                                if t == i {
                                    v = m.add(v, m.mul(p_mod, s_prime[t][k]));
                                }
                                v
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        SwitchKey { seed, b, a }
    }

    /// Hybrid key switch of `d` (NTT form over `q_0..q_l`): returns `(k0, k1)`
    /// with `k0 + k1 s ≈ d s'`.
    fn key_switch(&self, d: &Rns, key: &SwitchKey) -> (Rns, Rns) {
        let l1 = d.len();
        let sp = self.special();
        let targets: Vec<usize> = (0..l1).chain(std::iter::once(sp)).collect();
        let mut acc0: Rns = vec![vec![0; self.n]; targets.len()];
        let mut acc1: Rns = vec![vec![0; self.n]; targets.len()];
        for i in 0..l1 {
            let mut coeff = d[i].clone();
            self.tables[i].inverse(&mut coeff);
            let src = &self.tables[i].m;
            for (slot, &t) in targets.iter().enumerate() {
                let m = &self.tables[t].m;
                let lifted: Vec<u64> = if t == i {
                    d[i].clone()
                } else {
                    let mut v: Vec<u64> = coeff.iter().map(|&c| m.from_i64(src.centered(c))).collect();
                    self.tables[t].forward(&mut v);
                    v
                };
                let (kb, ka) = (&key.b[i][t], &key.a[i][t]);
                let (a0, a1) = (&mut acc0[slot], &mut acc1[slot]);
                for k in 0..self.n {
                    a0[k] = m.add(a0[k], m.mul(lifted[k], kb[k]));
                    a1[k] = m.add(a1[k], m.mul(lifted[k], ka[k]));
                }
            }
        }
        (self.mod_down(acc0), self.mod_down(acc1))
    }

    /// Divide by the special prime and drop its residue.
    fn mod_down(&self, mut acc: Rns) -> Rns {
        let sp = self.special();
        let mut last = acc.pop().expect("special residue");
        self.tables[sp].inverse(&mut last);
        let pm = &self.tables[sp].m;
        let p = pm.q;
        for (j, res) in acc.iter_mut().enumerate() {
            let m = &self.tables[j].m;
            let mut lifted: Vec<u64> = last.iter().map(|&c| m.from_i64(pm.centered(c))).collect();
            self.tables[j].forward(&mut lifted);
            let p_inv = m.inv(p % m.q);
            for k in 0..self.n {
                res[k] = m.mul(m.sub(res[k], lifted[k]), p_inv);
            }
        }
        acc
    }

    /// Divide by the top prime of the chain and drop it.
    fn rescale(&self, polys: &mut [Rns]) -> Result<u64, HeError> {
        let l = polys[0].len();
        if l < 2 {
            return Err(HeError::LevelExhausted);
        }
        let top = l - 1;
        let tm = &self.tables[top].m;
        for poly in polys.iter_mut() {
            let mut last = poly.pop().expect("top residue");
            self.tables[top].inverse(&mut last);
            for (j, res) in poly.iter_mut().enumerate() {
                let m = &self.tables[j].m;
                let mut lifted: Vec<u64> = last.iter().map(|&c| m.from_i64(tm.centered(c))).collect();
                self.tables[j].forward(&mut lifted);
                let inv = m.inv(tm.q % m.q);
                for k in 0..self.n {
                    res[k] = m.mul(m.sub(res[k], lifted[k]), inv);
                }
            }
        }
        Ok(tm.q)
    }

    fn check(&self, ct: &CipherVector) -> Result<(), HeError> {
        if ct.fingerprint != self.fingerprint {
            return Err(HeError::ParamsMismatch);
        }
        Ok(())
    }
}

/// Evaluation key for switching from some `s'` back to `s`. Only the seed of
/// the uniform halves is serialized.
#[derive(Debug, Clone)]
pub struct SwitchKey {
    seed: [u8; 32],
    b: Vec<Rns>,
    a: Vec<Rns>,
}

#[derive(Clone)]
pub struct SecretKey {
    ctx: Arc<CkksContext>,
    coeffs: Vec<i8>,
    ntt: Rns,
}

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Debug, Clone)]
pub struct PublicKey {
    ctx: Arc<CkksContext>,
    seed: [u8; 32],
    b: Rns,
    a: Rns,
}

#[derive(Debug, Clone)]
pub struct EvalKeys {
    ctx: Arc<CkksContext>,
    relin: SwitchKey,
    rotations: BTreeMap<usize, SwitchKey>,
}

impl EvalKeys {
    pub fn rotation_steps(&self) -> Vec<usize> {
        self.rotations.keys().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct KeySet {
    pub secret: SecretKey,
    pub public: PublicKey,
    pub eval: EvalKeys,
}

/// Deterministic key generation from `seed`.
pub fn keygen(ctx: &Arc<CkksContext>, seed: u64) -> KeySet {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let coeffs: Vec<i64> = ctx.sample_ternary(&mut rng);
    let all = ctx.key_primes();
    let s: Rns = all.iter().map(|&t| ctx.signed_to_ntt(&coeffs, t)).collect();

    let mut pk_seed = [0u8; 32];
    rng.fill_bytes(&mut pk_seed);
    let q_primes: Vec<usize> = (0..ctx.num_q()).collect();
    let a = ctx.expand_uniform(pk_seed, 1, &q_primes).remove(0);
    let e = ctx.sample_error(&mut rng);
    let b: Rns = q_primes
        .iter()
        .map(|&t| {
            let m = &ctx.tables[t].m;
            let e_t = ctx.signed_to_ntt(&e, t);
            (0..ctx.n).map(|k| m.sub(e_t[k], m.mul(a[t][k], s[t][k]))).collect()
        })
        .collect();

    let s2: Rns = all
        .iter()
        .map(|&t| {
            let m = &ctx.tables[t].m;
            s[t].iter().map(|&v| m.mul(v, v)).collect()
        })
        .collect();
    let relin = ctx.make_switch_key(&s, &s2, &mut rng);
    let mut rotations = BTreeMap::new();
    for (&r, map) in &ctx.galois_maps {
        let s_rot: Rns = s.iter().map(|res| map.iter().map(|&j| res[j as usize]).collect()).collect();
        rotations.insert(r, ctx.make_switch_key(&s, &s_rot, &mut rng));
    }
    KeySet {
        secret: SecretKey { ctx: ctx.clone(), coeffs: coeffs.iter().map(|&c| c as i8).collect(), ntt: s },
        public: PublicKey { ctx: ctx.clone(), seed: pk_seed, b, a },
        eval: EvalKeys { ctx: ctx.clone(), relin, rotations },
    }
}

/// A CKKS ciphertext in NTT form over `q_0 .. q_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct CipherVector {
    c0: Rns,
    c1: Rns,
    scale: f64,
    level: usize,
    meta: CtMeta,
    fingerprint: [u8; 32],
}

impl CipherVector {
    /// Remaining ciphertext-ciphertext multiplications.
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn logical_len(&self) -> usize {
        self.meta.logical_len
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Number of RNS primes still in the modulus.
    pub fn prime_count(&self) -> usize {
        self.c0.len()
    }

    /// Envelope: fingerprint (32) | level u8 | logical_len u32 | payload len u32 | payload.
    pub fn to_envelope(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(10 + 16 * self.c0.len() * self.c0[0].len());
        payload.extend_from_slice(&self.scale.to_le_bytes());
        payload.push(self.meta.tail_clean as u8);
        payload.push(self.c0.len() as u8);
        for poly in [&self.c0, &self.c1] {
            for res in poly {
                for v in res {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut out = Vec::with_capacity(41 + payload.len());
        out.extend_from_slice(&self.fingerprint);
        out.push(self.level as u8);
        out.extend_from_slice(&(self.meta.logical_len as u32).to_le_bytes());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_envelope(ctx: &CkksContext, bytes: &[u8]) -> Result<Self, HeError> {
        let bad = |m: &str| HeError::Envelope(m.to_string());
        if bytes.len() < 41 {
            return Err(bad("truncated header"));
        }
        let fingerprint: [u8; 32] = bytes[..32].try_into().unwrap();
        if fingerprint != ctx.fingerprint {
            return Err(HeError::ParamsMismatch);
        }
        let level = bytes[32] as usize;
        let logical_len = u32::from_le_bytes(bytes[33..37].try_into().unwrap()) as usize;
        let plen = u32::from_le_bytes(bytes[37..41].try_into().unwrap()) as usize;
        let payload = &bytes[41..];
        if payload.len() != plen || plen < 10 {
            return Err(bad("payload length mismatch"));
        }
        let scale = f64::from_le_bytes(payload[..8].try_into().unwrap());
        let tail_clean = payload[8] != 0;
        let primes = payload[9] as usize;
        let n = ctx.n;
        if primes == 0 || primes > ctx.num_q() || plen != 10 + 2 * primes * n * 8 {
            return Err(bad("inconsistent prime count"));
        }
        if level > ctx.params.multiplicative_depth || logical_len > ctx.params.slot_count || !(scale > 0.0) {
            return Err(bad("header out of range"));
        }
        let mut words = payload[10..].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()));
        let mut read_poly = || -> Result<Rns, HeError> {
            (0..primes)
                .map(|j| {
                    let q = ctx.tables[j].m.q;
                    let res: Vec<u64> = words.by_ref().take(n).collect();
                    if res.iter().any(|&v| v >= q) {
                        return Err(bad("residue out of range"));
                    }
                    Ok(res)
                })
                .collect()
        };
        let c0 = read_poly()?;
        let c1 = read_poly()?;
        Ok(Self { c0, c1, scale, level, meta: CtMeta { logical_len, tail_clean }, fingerprint })
    }
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], ctx: &CkksContext) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&[1])?;
    ctx.params.write_to(w)?;
    w.write_all(&ctx.fingerprint)
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<Arc<CkksContext>, HeError> {
    let mut m = [0u8; 5];
    r.read_exact(&mut m)?;
    if &m[..4] != magic || m[4] != 1 {
        return Err(HeError::Envelope("bad key file header".into()));
    }
    let params = HeParams::read_from(r)?;
    let ctx = CkksContext::new(params)?;
    let mut fp = [0u8; 32];
    r.read_exact(&mut fp)?;
    if fp != ctx.fingerprint {
        return Err(HeError::ParamsMismatch);
    }
    Ok(ctx)
}

fn write_rns(w: &mut impl Write, rns: &Rns) -> std::io::Result<()> {
    for res in rns {
        for v in res {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_rns(r: &mut impl Read, ctx: &CkksContext, primes: &[usize]) -> Result<Rns, HeError> {
    let mut buf = vec![0u8; ctx.n * 8];
    primes
        .iter()
        .map(|&p| {
            r.read_exact(&mut buf)?;
            let q = ctx.tables[p].m.q;
            let res: Vec<u64> = buf.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
            if res.iter().any(|&v| v >= q) {
                return Err(HeError::Envelope("key residue out of range".into()));
            }
            Ok(res)
        })
        .collect()
}

impl SecretKey {
    pub fn context(&self) -> &Arc<CkksContext> {
        &self.ctx
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_header(w, b"EPSK", &self.ctx)?;
        w.write_all(&self.coeffs.iter().map(|&c| c as u8).collect::<Vec<_>>())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, HeError> {
        let ctx = read_header(r, b"EPSK")?;
        let mut raw = vec![0u8; ctx.n];
        r.read_exact(&mut raw)?;
        let coeffs: Vec<i8> = raw.iter().map(|&b| b as i8).collect();
        if coeffs.iter().any(|c| !(-1..=1).contains(c)) {
            return Err(HeError::Envelope("secret key is not ternary".into()));
        }
        let wide: Vec<i64> = coeffs.iter().map(|&c| c as i64).collect();
        let ntt = ctx.key_primes().iter().map(|&t| ctx.signed_to_ntt(&wide, t)).collect();
        Ok(Self { ctx, coeffs, ntt })
    }
}

impl PublicKey {
    pub fn context(&self) -> &Arc<CkksContext> {
        &self.ctx
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_header(w, b"EPPK", &self.ctx)?;
        w.write_all(&self.seed)?;
        write_rns(w, &self.b)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, HeError> {
        let ctx = read_header(r, b"EPPK")?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let q_primes: Vec<usize> = (0..ctx.num_q()).collect();
        let b = read_rns(r, &ctx, &q_primes)?;
        let a = ctx.expand_uniform(seed, 1, &q_primes).remove(0);
        Ok(Self { ctx, seed, b, a })
    }
}

impl EvalKeys {
    pub fn context(&self) -> &Arc<CkksContext> {
        &self.ctx
    }

    fn write_switch(w: &mut impl Write, k: &SwitchKey) -> std::io::Result<()> {
        w.write_all(&k.seed)?;
        for digit in &k.b {
            write_rns(w, digit)?;
        }
        Ok(())
    }

    fn read_switch(r: &mut impl Read, ctx: &CkksContext) -> Result<SwitchKey, HeError> {
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let primes = ctx.key_primes();
        let b = (0..ctx.num_q()).map(|_| read_rns(r, ctx, &primes)).collect::<Result<Vec<_>, _>>()?;
        let a = ctx.expand_uniform(seed, ctx.num_q(), &primes);
        Ok(SwitchKey { seed, b, a })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_header(w, b"EPEK", &self.ctx)?;
        Self::write_switch(w, &self.relin)?;
        w.write_all(&(self.rotations.len() as u32).to_le_bytes())?;
        for (r, k) in &self.rotations {
            w.write_all(&(*r as u32).to_le_bytes())?;
            Self::write_switch(w, k)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, HeError> {
        let ctx = read_header(r, b"EPEK")?;
        let relin = Self::read_switch(r, &ctx)?;
        let mut count = [0u8; 4];
        r.read_exact(&mut count)?;
        let mut rotations = BTreeMap::new();
        for _ in 0..u32::from_le_bytes(count) {
            let mut step = [0u8; 4];
            r.read_exact(&mut step)?;
            let step = u32::from_le_bytes(step) as usize;
            if !ctx.galois_maps.contains_key(&step) {
                return Err(HeError::Envelope(format!("unexpected rotation step {step}")));
            }
            rotations.insert(step, Self::read_switch(r, &ctx)?);
        }
        Ok(Self { ctx, relin, rotations })
    }
}

/// CKKS backend. Holds whichever keys this party owns: a data holder has
/// the public and evaluation keys, the analyst has the secret key.
#[derive(Debug, Clone)]
pub struct Ckks {
    ctx: Arc<CkksContext>,
    public: Option<Arc<PublicKey>>,
    eval: Option<Arc<EvalKeys>>,
    secret: Option<Arc<SecretKey>>,
}

impl Ckks {
    pub fn new(ctx: Arc<CkksContext>) -> Self {
        Self { ctx, public: None, eval: None, secret: None }
    }

    /// All keys in one party; for tests and the comparison report.
    pub fn with_keys(keys: &KeySet) -> Self {
        Self::new(keys.public.ctx.clone())
            .with_public(keys.public.clone())
            .with_eval(keys.eval.clone())
            .with_secret(keys.secret.clone())
    }

    pub fn with_public(mut self, pk: PublicKey) -> Self {
        self.public = Some(Arc::new(pk));
        self
    }

    pub fn with_eval(mut self, ek: EvalKeys) -> Self {
        self.eval = Some(Arc::new(ek));
        self
    }

    pub fn with_secret(mut self, sk: SecretKey) -> Self {
        self.secret = Some(Arc::new(sk));
        self
    }

    pub fn context(&self) -> &Arc<CkksContext> {
        &self.ctx
    }

    fn eval_keys(&self) -> Result<&EvalKeys, HeError> {
        self.eval.as_deref().ok_or(HeError::MissingKey("evaluation"))
    }

    fn pointwise(&self, a: &Rns, b: &Rns) -> Rns {
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(j, (x, y))| {
                let m = &self.ctx.tables[j].m;
                x.iter().zip(y).map(|(&u, &v)| m.mul(u, v)).collect()
            })
            .collect()
    }

    fn combine(&self, a: &Rns, b: &Rns, subtract: bool) -> Rns {
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(j, (x, y))| {
                let m = &self.ctx.tables[j].m;
                x.iter().zip(y).map(|(&u, &v)| if subtract { m.sub(u, v) } else { m.add(u, v) }).collect()
            })
            .collect()
    }

    /// Bring both operands to the same prime count by dropping top residues.
    fn align(&self, a: &CipherVector, b: &CipherVector) -> Result<(CipherVector, CipherVector), HeError> {
        self.ctx.check(a)?;
        self.ctx.check(b)?;
        let rel = (a.scale - b.scale).abs() / a.scale.max(b.scale);
        if rel > 1e-9 {
            return Err(HeError::ScaleMismatch { a: a.scale, b: b.scale });
        }
        let l = a.prime_count().min(b.prime_count());
        let (mut a, mut b) = (a.clone(), b.clone());
        for ct in [&mut a, &mut b] {
            ct.c0.truncate(l);
            ct.c1.truncate(l);
        }
        let level = a.level.min(b.level);
        a.level = level;
        b.level = level;
        Ok((a, b))
    }

    fn add_sub(&self, a: &CipherVector, b: &CipherVector, subtract: bool) -> Result<CipherVector, HeError> {
        let (a, b) = self.align(a, b)?;
        Ok(CipherVector {
            c0: self.combine(&a.c0, &b.c0, subtract),
            c1: self.combine(&a.c1, &b.c1, subtract),
            scale: a.scale,
            level: a.level,
            meta: CtMeta {
                logical_len: a.meta.logical_len.max(b.meta.logical_len),
                tail_clean: a.meta.tail_clean && b.meta.tail_clean,
            },
            fingerprint: a.fingerprint,
        })
    }

    /// Multiply every residue by the integer `round(t * q_top)` without rescaling.
    fn scaled_by(&self, ct: &CipherVector, t: f64) -> (Rns, Rns) {
        let top = ct.prime_count() - 1;
        let factor = (t * self.ctx.tables[top].m.q as f64).round() as i128;
        let mul = |poly: &Rns| -> Rns {
            poly.iter()
                .enumerate()
                .map(|(j, res)| {
                    let m = &self.ctx.tables[j].m;
                    let f = m.from_i128(factor);
                    let fs = m.shoup(f);
                    res.iter().map(|&v| m.mul_shoup(v, f, fs)).collect()
                })
                .collect()
        };
        (mul(&ct.c0), mul(&ct.c1))
    }

    fn rotate_pow2(&self, ct: &CipherVector, step: usize) -> Result<CipherVector, HeError> {
        let keys = self.eval_keys()?;
        let key = keys.rotations.get(&step).ok_or(HeError::RotationUnsupported(step))?;
        let map = &self.ctx.galois_maps[&step];
        let permute = |poly: &Rns| -> Rns {
            poly.iter().map(|res| map.iter().map(|&j| res[j as usize]).collect()).collect()
        };
        let c0 = permute(&ct.c0);
        let c1 = permute(&ct.c1);
        let (k0, k1) = self.ctx.key_switch(&c1, key);
        Ok(CipherVector { c0: self.combine(&c0, &k0, false), c1: k1, ..ct.clone() })
    }
}

impl HeBackend for Ckks {
    type Ct = CipherVector;

    fn params(&self) -> &HeParams {
        &self.ctx.params
    }

    fn encrypt(&self, x: &[f64]) -> Result<CipherVector, HeError> {
        let z: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.encrypt_complex(&z)
    }

    fn encrypt_complex(&self, z: &[Complex64]) -> Result<CipherVector, HeError> {
        let pk = self.public.as_deref().ok_or(HeError::MissingKey("public"))?;
        let ctx = &self.ctx;
        let l = ctx.num_q();
        let scale = ctx.default_scale();
        let m = ctx.encode_rns(z, scale, l)?;
        let mut rng = rand::thread_rng();
        let v = ctx.sample_ternary(&mut rng);
        let e0 = ctx.sample_error(&mut rng);
        let e1 = ctx.sample_error(&mut rng);
        let mut c0 = Vec::with_capacity(l);
        let mut c1 = Vec::with_capacity(l);
        for j in 0..l {
            let md = &ctx.tables[j].m;
            let (vj, e0j, e1j) = (ctx.signed_to_ntt(&v, j), ctx.signed_to_ntt(&e0, j), ctx.signed_to_ntt(&e1, j));
            c0.push((0..ctx.n).map(|k| md.add(md.add(md.mul(vj[k], pk.b[j][k]), e0j[k]), m[j][k])).collect());
            c1.push((0..ctx.n).map(|k| md.add(md.mul(vj[k], pk.a[j][k]), e1j[k])).collect());
        }
        Ok(CipherVector {
            c0,
            c1,
            scale,
            level: ctx.params.multiplicative_depth,
            meta: CtMeta { logical_len: z.len(), tail_clean: true },
            fingerprint: ctx.fingerprint,
        })
    }

    fn decrypt_complex(&self, ct: &CipherVector) -> Result<Vec<Complex64>, HeError> {
        let sk = self.secret.as_deref().ok_or(HeError::MissingKey("secret"))?;
        self.ctx.check(ct)?;
        let t = &self.ctx.tables[0];
        let m = &t.m;
        let mut v: Vec<u64> = (0..self.ctx.n).map(|k| m.add(ct.c0[0][k], m.mul(ct.c1[0][k], sk.ntt[0][k]))).collect();
        t.inverse(&mut v);
        let coeffs: Vec<f64> = v.iter().map(|&c| m.centered(c) as f64).collect();
        Ok(self.ctx.encoder.decode(&coeffs, ct.scale))
    }

    fn meta(&self, ct: &CipherVector) -> CtMeta {
        ct.meta
    }

    fn set_meta(&self, ct: &mut CipherVector, meta: CtMeta) {
        ct.meta = meta;
    }

    fn level(&self, ct: &CipherVector) -> usize {
        ct.level
    }

    fn add(&self, a: &CipherVector, b: &CipherVector) -> Result<CipherVector, HeError> {
        self.add_sub(a, b, false)
    }

    fn sub(&self, a: &CipherVector, b: &CipherVector) -> Result<CipherVector, HeError> {
        self.add_sub(a, b, true)
    }

    fn rotate(&self, ct: &CipherVector, r: usize) -> Result<CipherVector, HeError> {
        self.ctx.check(ct)?;
        let slots = self.ctx.params.slot_count;
        let r = r % slots;
        let mut out = ct.clone();
        let mut bit = 1;
        while bit < slots {
            if r & bit != 0 {
                out = self.rotate_pow2(&out, bit)?;
            }
            bit <<= 1;
        }
        Ok(out)
    }

    fn mul_plain(&self, ct: &CipherVector, pt: &[Complex64]) -> Result<CipherVector, HeError> {
        self.ctx.check(ct)?;
        let l = ct.prime_count();
        if l < 2 {
            return Err(HeError::LevelExhausted);
        }
        let q_top = self.ctx.tables[l - 1].m.q as f64;
        let p = self.ctx.encode_rns(pt, q_top, l)?;
        let mut polys = [self.pointwise(&ct.c0, &p), self.pointwise(&ct.c1, &p)];
        self.ctx.rescale(&mut polys)?;
        let [c0, c1] = polys;
        Ok(CipherVector { c0, c1, ..ct.clone() })
    }

    fn mul_scalar(&self, ct: &CipherVector, t: f64) -> Result<CipherVector, HeError> {
        self.ctx.check(ct)?;
        if ct.prime_count() < 2 {
            return Err(HeError::LevelExhausted);
        }
        if !t.is_finite() {
            return Err(HeError::InvalidInput("non-finite scalar".into()));
        }
        let (c0, c1) = self.scaled_by(ct, t);
        let mut polys = [c0, c1];
        self.ctx.rescale(&mut polys)?;
        let [c0, c1] = polys;
        Ok(CipherVector { c0, c1, ..ct.clone() })
    }

    fn mul(&self, a: &CipherVector, b: &CipherVector) -> Result<CipherVector, HeError> {
        let (a, b) = self.align(a, b).or_else(|e| match e {
            // Products do not need equal scales.
            HeError::ScaleMismatch { .. } => {
                let mut b2 = b.clone();
                b2.scale = a.scale;
                let (a2, mut b2) = self.align(a, &b2)?;
                b2.scale = b.scale;
                Ok((a2, b2))
            }
            other => Err(other),
        })?;
        if a.level == 0 || a.prime_count() < 2 {
            return Err(HeError::LevelExhausted);
        }
        let keys = self.eval_keys()?;
        let d0 = self.pointwise(&a.c0, &b.c0);
        let d1 = self.combine(&self.pointwise(&a.c0, &b.c1), &self.pointwise(&a.c1, &b.c0), false);
        let d2 = self.pointwise(&a.c1, &b.c1);
        let (k0, k1) = self.ctx.key_switch(&d2, &keys.relin);
        let mut polys = [self.combine(&d0, &k0, false), self.combine(&d1, &k1, false)];
        let q = self.ctx.rescale(&mut polys)?;
        let [c0, c1] = polys;
        Ok(CipherVector {
            c0,
            c1,
            scale: a.scale * b.scale / q as f64,
            level: a.level - 1,
            meta: CtMeta {
                logical_len: a.meta.logical_len.max(b.meta.logical_len),
                tail_clean: a.meta.tail_clean || b.meta.tail_clean,
            },
            fingerprint: a.fingerprint,
        })
    }

    /// Baby-step giant-step evaluation. The rotation amounts are covered by
    /// the shortest cyclic arc `base .. base + span`; baby steps are chained
    /// rotations by one, giant steps are Horner rotations by a power of two.
    fn linear_transform(&self, ct: &CipherVector, terms: &[(usize, Weight)]) -> Result<CipherVector, HeError> {
        self.ctx.check(ct)?;
        let l = ct.prime_count();
        if l < 2 {
            return Err(HeError::LevelExhausted);
        }
        let slots = self.ctx.params.slot_count;
        let terms = Weight::merge(terms, slots);
        if terms.is_empty() {
            return Err(HeError::InvalidInput("no terms".into()));
        }
        let amounts: Vec<usize> = terms.iter().map(|t| t.0).collect();
        let (mut gap, mut base) = (amounts[0] + slots - amounts[amounts.len() - 1], amounts[0]);
        for w in amounts.windows(2) {
            if w[1] - w[0] > gap {
                gap = w[1] - w[0];
                base = w[1];
            }
        }
        let span = if amounts.len() == 1 { 1 } else { slots - gap + 1 };
        let log_span = usize::BITS - (span.max(2) - 1).leading_zeros();
        let baby = (1usize << log_span.div_ceil(2)).min(span);
        let giants = span.div_ceil(baby);

        let mut babies = vec![self.rotate(ct, base)?];
        for _ in 1..baby {
            let next = self.rotate_pow2(babies.last().unwrap(), 1)?;
            babies.push(next);
        }

        let q_top = self.ctx.tables[l - 1].m.q as f64;
        let mut groups: Vec<Vec<(usize, &Weight)>> = vec![Vec::new(); giants];
        for (r, w) in &terms {
            let d = (r + slots - base) % slots;
            groups[d / baby].push((d % baby, w));
        }
        let mut acc: Option<CipherVector> = None;
        for (g, group) in groups.iter().enumerate().rev() {
            let mut u: Option<(Rns, Rns)> = None;
            for &(b, w) in group {
                let src = &babies[b];
                let (p0, p1) = match w {
                    Weight::Scalar(t) => self.scaled_by(src, *t),
                    Weight::Slots(_) => {
                        // Pre-rotate right by the giant offset so the Horner
                        // rotations line it back up.
                        let mut full = w.to_slots(slots);
                        full.rotate_right((g * baby) % slots);
                        let pt = self.ctx.encode_rns(&full, q_top, l)?;
                        (self.pointwise(&src.c0, &pt), self.pointwise(&src.c1, &pt))
                    }
                };
                u = Some(match u {
                    None => (p0, p1),
                    Some((a0, a1)) => (self.combine(&a0, &p0, false), self.combine(&a1, &p1, false)),
                });
            }
            let rotated = match acc.take() {
                Some(a) => Some(self.rotate_pow2(&a, baby)?),
                None => None,
            };
            acc = match (rotated, u) {
                (None, None) => None,
                (Some(a), None) => Some(a),
                (None, Some((c0, c1))) => Some(CipherVector { c0, c1, ..ct.clone() }),
                (Some(a), Some((c0, c1))) => {
                    Some(CipherVector { c0: self.combine(&a.c0, &c0, false), c1: self.combine(&a.c1, &c1, false), ..a })
                }
            };
        }
        let acc = acc.expect("at least one term");
        let mut polys = [acc.c0, acc.c1];
        self.ctx.rescale(&mut polys)?;
        let [c0, c1] = polys;
        Ok(CipherVector { c0, c1, ..ct.clone() })
    }
}
