//! A small 1-D CNN: conv(F×W) → tanh → dropout → dense(H) → tanh → dense(5)
//! → softmax, trained with plain mini-batch SGD on cross-entropy.
//!
//! All parameters live in one flat vector so that SGD, finite-difference
//! checks and serialization share a single layout:
//! `[conv_w (F·W) | conv_b (F) | hidden_w (H·F·L) | hidden_b (H) | out_w (5·H) | out_b (5)]`
//! with `L = 180 − W + 1`.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{check_normalized, BeatSegment, ClassLabel, ClassifierError, NUM_CLASSES, SEGMENT_LEN};

const MAGIC: &[u8; 4] = b"EPCN";
const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hyperparams {
    pub filters: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self { filters: 16, kernel: 7, hidden: 32, learning_rate: 0.01, dropout: 0.3, seed: 7 }
    }
}

impl Hyperparams {
    fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::InvalidHyperparams(m.into()));
        if self.filters == 0 || self.hidden == 0 {
            return bad("filters and hidden must be positive");
        }
        if self.kernel == 0 || self.kernel > SEGMENT_LEN {
            return bad("kernel width must lie in 1..=180");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    filters: usize,
    kernel: usize,
    hidden: usize,
    conv_len: usize,
    conv_w: usize,
    conv_b: usize,
    hid_w: usize,
    hid_b: usize,
    out_w: usize,
    out_b: usize,
    total: usize,
}

impl Layout {
    fn new(h: &Hyperparams) -> Self {
        let conv_len = SEGMENT_LEN - h.kernel + 1;
        let flat = h.filters * conv_len;
        let conv_w = 0;
        let conv_b = conv_w + h.filters * h.kernel;
        let hid_w = conv_b + h.filters;
        let hid_b = hid_w + h.hidden * flat;
        let out_w = hid_b + h.hidden;
        let out_b = out_w + NUM_CLASSES * h.hidden;
        let total = out_b + NUM_CLASSES;
        Self { filters: h.filters, kernel: h.kernel, hidden: h.hidden, conv_len, conv_w, conv_b, hid_w, hid_b, out_w, out_b, total }
    }

    fn flat(&self) -> usize {
        self.filters * self.conv_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    hyper: Hyperparams,
    layout: Layout,
    params: Vec<f64>,
    /// Sampling rate of the data the model was trained on, Hz.
    pub sample_rate: f64,
}

/// Gradient of the loss w.r.t. every parameter, in the model's flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub train_size: usize,
    pub val_size: usize,
}

impl TrainReport {
    pub fn final_val_accuracy(&self) -> f64 {
        self.history.last().map_or(0.0, |e| e.val_accuracy)
    }
}

struct Activations {
    conv: Vec<f64>,
    /// Post-dropout conv activations feeding the hidden layer.
    dropped: Vec<f64>,
    mask: Option<Vec<f64>>,
    hidden: Vec<f64>,
    probs: [f64; NUM_CLASSES],
}

impl CnnModel {
    /// Glorot-uniform initialisation from `hyper.seed`.
    pub fn new(hyper: Hyperparams) -> Result<Self, ClassifierError> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.gen_range(-limit..limit);
            }
        };
        fill(layout.conv_w..layout.conv_b, layout.kernel, layout.filters);
        fill(layout.hid_w..layout.hid_b, layout.flat(), layout.hidden);
        fill(layout.out_w..layout.out_b, layout.hidden, NUM_CLASSES);
        Ok(Self { hyper, layout, params, sample_rate: 360.0 })
    }

    /// A model with every parameter zero.
    pub fn zeros(hyper: Hyperparams) -> Result<Self, ClassifierError> {
        let mut m = Self::new(hyper)?;
        m.params.fill(0.0);
        Ok(m)
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn conv_output_len(&self) -> usize {
        self.layout.conv_len
    }

    fn forward(&self, x: &[f64], dropout: Option<&mut ChaCha8Rng>) -> Activations {
        let l = &self.layout;
        let p = &self.params;
        let mut conv = vec![0.0; l.flat()];
        for f in 0..l.filters {
            let w = &p[l.conv_w + f * l.kernel..l.conv_w + (f + 1) * l.kernel];
            let b = p[l.conv_b + f];
            for t in 0..l.conv_len {
                let s: f64 = w.iter().zip(&x[t..t + l.kernel]).map(|(a, b)| a * b).sum();
                conv[f * l.conv_len + t] = (s + b).tanh();
            }
        }
        let (dropped, mask) = match dropout {
            Some(rng) if self.hyper.dropout > 0.0 => {
                let keep = 1.0 - self.hyper.dropout;
                let mask: Vec<f64> =
                    (0..conv.len()).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                (conv.iter().zip(&mask).map(|(a, m)| a * m).collect(), Some(mask))
            }
            _ => (conv.clone(), None),
        };
        let flat = l.flat();
        let hidden: Vec<f64> = (0..l.hidden)
            .map(|h| {
                let w = &p[l.hid_w + h * flat..l.hid_w + (h + 1) * flat];
                let s: f64 = w.iter().zip(&dropped).map(|(a, b)| a * b).sum();
                (s + p[l.hid_b + h]).tanh()
            })
            .collect();
        let mut logits = [0.0; NUM_CLASSES];
        for (c, z) in logits.iter_mut().enumerate() {
            let w = &p[l.out_w + c * l.hidden..l.out_w + (c + 1) * l.hidden];
            *z = p[l.out_b + c] + w.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
        }
        Activations { conv, dropped, mask, hidden, probs: softmax(&logits) }
    }

    /// Accumulate `scale · dLoss/dθ` for one example into `grad`.
    fn backward(&self, x: &[f64], target: usize, act: &Activations, scale: f64, grad: &mut [f64]) {
        let l = &self.layout;
        let p = &self.params;
        let flat = l.flat();

        let mut d_logits = act.probs;
        d_logits[target] -= 1.0;
        for v in d_logits.iter_mut() {
            *v *= scale;
        }

        let mut d_hidden = vec![0.0; l.hidden];
        for (c, &dz) in d_logits.iter().enumerate() {
            grad[l.out_b + c] += dz;
            let row = l.out_w + c * l.hidden;
            for h in 0..l.hidden {
                grad[row + h] += dz * act.hidden[h];
                d_hidden[h] += dz * p[row + h];
            }
        }

        let mut d_dropped = vec![0.0; flat];
        for h in 0..l.hidden {
            let dz = d_hidden[h] * (1.0 - act.hidden[h] * act.hidden[h]);
            if dz == 0.0 {
                continue;
            }
            grad[l.hid_b + h] += dz;
            let row = l.hid_w + h * flat;
            let (gw, w) = (&mut grad[row..row + flat], &p[row..row + flat]);
            for i in 0..flat {
                gw[i] += dz * act.dropped[i];
                d_dropped[i] += dz * w[i];
            }
        }

        for f in 0..l.filters {
            let mut db = 0.0;
            let base = f * l.conv_len;
            for t in 0..l.conv_len {
                let i = base + t;
                let mut d = d_dropped[i];
                if let Some(mask) = &act.mask {
                    d *= mask[i];
                }
                let dz = d * (1.0 - act.conv[i] * act.conv[i]);
                db += dz;
                let gw = &mut grad[l.conv_w + f * l.kernel..l.conv_w + (f + 1) * l.kernel];
                for (k, g) in gw.iter_mut().enumerate() {
                    *g += dz * x[t + k];
                }
            }
            grad[l.conv_b + f] += db;
        }
    }

    /// Cross-entropy loss of one example with dropout disabled.
    pub fn loss(&self, x: &[f64], target: ClassLabel) -> f64 {
        let act = self.forward(x, None);
        -act.probs[target.index()].max(f64::MIN_POSITIVE).ln()
    }

    /// Analytic gradient of `loss_scale · loss` for one example, dropout disabled.
    pub fn gradients(&self, x: &[f64], target: ClassLabel, loss_scale: f64) -> Gradients {
        let act = self.forward(x, None);
        let mut grad = vec![0.0; self.layout.total];
        self.backward(x, target.index(), &act, loss_scale, &mut grad);
        Gradients(grad)
    }

    pub fn probabilities(&self, x: &[f64]) -> [f64; NUM_CLASSES] {
        self.forward(x, None).probs
    }

    /// Classify a normalized segment.
    pub fn predict(&self, segment: &BeatSegment) -> Result<(ClassLabel, [f64; NUM_CLASSES]), ClassifierError> {
        check_normalized(&segment.samples)?;
        let probs = self.probabilities(&segment.samples);
        Ok((ClassLabel::from_index(argmax(&probs)).expect("five classes"), probs))
    }

    /// Train on labeled, normalized segments.
    ///
    /// The dataset is first put into a canonical order, so the result does
    /// not depend on the order segments are supplied in. A stratified 20 %
    /// validation split is held out and scored after every epoch.
    pub fn train(
        &mut self,
        dataset: &[BeatSegment],
        epochs: usize,
        batch_size: usize,
    ) -> Result<TrainReport, ClassifierError> {
        if batch_size == 0 {
            return Err(ClassifierError::InvalidHyperparams("batch size must be positive".into()));
        }
        let mut data: Vec<(&[f64], usize)> = Vec::with_capacity(dataset.len());
        for seg in dataset {
            let label = seg.label.ok_or_else(|| ClassifierError::Dataset("unlabeled segment".into()))?;
            if seg.samples.len() != SEGMENT_LEN {
                return Err(ClassifierError::BadLength(seg.samples.len()));
            }
            data.push((&seg.samples, label.index()));
        }
        data.sort_by(|a, b| {
            a.1.cmp(&b.1).then_with(|| {
                a.0.iter().zip(b.0).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            })
        });

        let mut rng = ChaCha8Rng::seed_from_u64(self.hyper.seed ^ 0x5eed_0001);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for class in 0..NUM_CLASSES {
            let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].1 == class).collect();
            idx.shuffle(&mut rng);
            let n_val = if idx.len() >= 2 { ((idx.len() as f64) * 0.2).round().max(1.0) as usize } else { 0 };
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        for label in ClassLabel::ALL {
            if !train.iter().any(|&i| data[i].1 == label.index()) {
                return Err(ClassifierError::ClassMissing(label));
            }
        }

        let mut history = Vec::with_capacity(epochs);
        let mut grad = vec![0.0; self.layout.total];
        for epoch in 0..epochs {
            let mut order = train.clone();
            order.shuffle(&mut rng);
            for batch in order.chunks(batch_size) {
                grad.fill(0.0);
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let (x, y) = data[i];
                    let act = self.forward(x, Some(&mut rng));
                    self.backward(x, y, &act, scale, &mut grad);
                }
                let lr = self.hyper.learning_rate;
                for (p, g) in self.params.iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
            let (train_loss, train_accuracy) = self.evaluate(&data, &train);
            let (val_loss, val_accuracy) = self.evaluate(&data, &val);
            history.push(EpochStats { epoch: epoch + 1, train_loss, train_accuracy, val_loss, val_accuracy });
        }
        Ok(TrainReport { history, train_size: train.len(), val_size: val.len() })
    }

    fn evaluate(&self, data: &[(&[f64], usize)], idx: &[usize]) -> (f64, f64) {
        if idx.is_empty() {
            return (0.0, 0.0);
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for &i in idx {
            let (x, y) = data[i];
            let probs = self.probabilities(x);
            loss -= probs[y].max(f64::MIN_POSITIVE).ln();
            correct += usize::from(argmax(&probs) == y);
        }
        (loss / idx.len() as f64, correct as f64 / idx.len() as f64)
    }

    /// Flat binary layout, little-endian:
    /// `"EPCN" | version u8 | filters u32 | kernel u32 | hidden u32 | lr f64 |
    /// dropout f64 | seed u64 | sample_rate f64 | n_params u32 | params f64…`
    pub fn write_to(&self, mut w: impl Write) -> Result<(), ClassifierError> {
        let h = &self.hyper;
        w.write_all(MAGIC)?;
        w.write_all(&[FORMAT_VERSION])?;
        for v in [h.filters, h.kernel, h.hidden] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&h.learning_rate.to_le_bytes())?;
        w.write_all(&h.dropout.to_le_bytes())?;
        w.write_all(&h.seed.to_le_bytes())?;
        w.write_all(&self.sample_rate.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ClassifierError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic[..4] != MAGIC || magic[4] != FORMAT_VERSION {
            return Err(ClassifierError::Format("bad magic or version".into()));
        }
        let mut u32s = [0usize; 3];
        for v in u32s.iter_mut() {
            *v = read_u32(&mut r)? as usize;
        }
        let hyper = Hyperparams {
            filters: u32s[0],
            kernel: u32s[1],
            hidden: u32s[2],
            learning_rate: read_f64(&mut r)?,
            dropout: read_f64(&mut r)?,
            seed: u64::from_le_bytes(read_array(&mut r)?),
        };
        let sample_rate = read_f64(&mut r)?;
        let mut model = Self::new(hyper)?;
        let n = read_u32(&mut r)? as usize;
        if n != model.layout.total {
            return Err(ClassifierError::Format(format!("expected {} params, found {n}", model.layout.total)));
        }
        for p in model.params.iter_mut() {
            *p = read_f64(&mut r)?;
        }
        model.sample_rate = sample_rate;
        Ok(model)
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], ClassifierError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32, ClassifierError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64, ClassifierError> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

fn softmax(z: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Compare analytic gradients against central finite differences over every
/// parameter and return the largest relative error. Relative error uses
/// `max(|analytic|, |numeric|, 1e-6)` as denominator so that parameters
/// with (near-)zero gradient are judged on absolute error.
pub fn grad_check(model: &CnnModel, x: &[f64], target: ClassLabel) -> f64 {
    const STEP: f64 = 1e-5;
    let analytic = model.gradients(x, target, 1.0);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..model.num_params() {
        let orig = probe.params[i];
        probe.params[i] = orig + STEP;
        let up = probe.loss(x, target);
        probe.params[i] = orig - STEP;
        let down = probe.loss(x, target);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic.0[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
