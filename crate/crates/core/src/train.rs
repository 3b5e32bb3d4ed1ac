//! Synthetic question/image task and the SGD training loop.
//!
//! Each image holds one colored square per quadrant, pushed into the outer
//! corner of that quadrant, on a gray background. The question is a one-hot
//! quadrant index and the answer is the color of that quadrant's square.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::block::ExecMode;
use crate::error::{Error, Result};
use crate::gate::{balance_loss, importance};
use crate::init::seeded;
use crate::network::{network_backward, network_forward, update_running_stats, Network};
use crate::nn::batchnorm::BnMode;
use crate::nn::counter::MacCounter;
use crate::tensor::{Element, Tensor};

/// Corners of the RGB cube, in order. Colors are drawn from a prefix.
pub const PALETTE: [[f64; 3]; 8] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, -1.0, -1.0],
];

/// Background intensity on every channel. Kept away from zero so the image
/// border stays visible against convolution padding.
pub const BACKGROUND: f64 = 0.5;

/// Number of quadrants an image is split into.
pub const QUADRANTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticTask {
    pub seed: u64,
    /// Images are `3 x image_size x image_size`.
    pub image_size: usize,
    pub n_colors: usize,
    pub n_positions: usize,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self { seed: 0, image_size: 32, n_colors: 4, n_positions: QUADRANTS, n_train: 4096, n_val: 1024 }
    }
}

impl SyntheticTask {
    /// Side length of one colored square.
    pub fn patch_size(&self) -> usize {
        self.image_size / 4
    }

    /// Top-left corner `(row, col)` of the square in quadrant `q`.
    pub fn patch_origin(&self, q: usize) -> (usize, usize) {
        let far = self.image_size - self.patch_size();
        (if q / 2 == 0 { 0 } else { far }, if q % 2 == 0 { 0 } else { far })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_positions != QUADRANTS {
            return Err(Error::Shape(format!("task supports {QUADRANTS} positions, got {}", self.n_positions)));
        }
        if self.n_colors < 2 || self.n_colors > PALETTE.len() {
            return Err(Error::Shape(format!("n_colors must be in 2..={}, got {}", PALETTE.len(), self.n_colors)));
        }
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::Shape(format!("image size must be a positive multiple of 4, got {}", self.image_size)));
        }
        if self.n_train == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }
}

/// Images `N x 3 x S x S`, one-hot questions `N x Q`, answers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub questions: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Element> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy out the samples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset<T>> {
        Ok(Dataset {
            images: rows(&self.images, idx)?,
            questions: rows(&self.questions, idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Images, questions and labels as one byte string.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.images.to_dump_bytes();
        out.extend(self.questions.to_dump_bytes());
        for &l in &self.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        out
    }
}

fn rows<T: Element>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let row = t.len() / t.shape()[0];
    let mut data = Vec::with_capacity(row * idx.len());
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

fn generate<T: Element>(task: &SyntheticTask, n: usize, rng: &mut impl Rng) -> Result<Dataset<T>> {
    let s = task.image_size;
    let p = task.patch_size();
    let plane = s * s;
    let mut images = vec![T::from_f64(BACKGROUND); n * 3 * plane];
    let mut questions = vec![T::zero(); n * task.n_positions];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let colors: Vec<usize> = (0..task.n_positions).map(|_| rng.random_range(0..task.n_colors)).collect();
        let q = rng.random_range(0..task.n_positions);
        for (quad, &c) in colors.iter().enumerate() {
            let (r0, c0) = task.patch_origin(quad);
            for (ch, &v) in PALETTE[c].iter().enumerate() {
                let base = (i * 3 + ch) * plane;
                for r in r0..r0 + p {
                    images[base + r * s + c0..base + r * s + c0 + p].fill(T::from_f64(v));
                }
            }
        }
        questions[i * task.n_positions + q] = T::one();
        labels.push(colors[q]);
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, s, s], images)?,
        questions: Tensor::new(vec![n, task.n_positions], questions)?,
        labels,
    })
}

/// Training and validation splits, drawn in that order from one stream
/// seeded by `task.seed`.
pub fn generate_dataset<T: Element>(task: &SyntheticTask) -> Result<(Dataset<T>, Dataset<T>)> {
    task.validate()?;
    let mut rng = seeded(task.seed);
    let train = generate(task, task.n_train, &mut rng)?;
    let val = if task.n_val == 0 {
        Dataset { images: Tensor::zeros(&[1]), questions: Tensor::zeros(&[1]), labels: Vec::new() }
    } else {
        generate(task, task.n_val, &mut rng)?
    };
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Weight of the balance loss.
    pub lambda: f64,
    pub k: usize,
    /// Seeds batch order.
    pub seed: u64,
    pub mode: ExecMode,
    /// Validation accuracy is measured every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            steps: 5000,
            lambda: 0.01,
            k: 2,
            seed: 0,
            mode: ExecMode::Sparse,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bad.push(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if self.batch_size < 2 {
            bad.push("batch size must be at least 2".into());
        }
        match bad.is_empty() {
            true => Ok(()),
            false => Err(Error::Shape(bad.join("; "))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub task_loss: f64,
    /// Sum over gated blocks.
    pub balance_loss: f64,
    /// Batch accuracy before the update.
    pub acc: f64,
    /// Per gated block, batch importance of every expert.
    pub importance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub block_names: Vec<String>,
    pub rows: Vec<TraceRow>,
    /// `(step, validation accuracy)` after that many updates.
    pub evals: Vec<(usize, f64)>,
}

impl TrainingTrace {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["step", "loss", "task_loss", "balance_loss", "acc"].map(String::from).to_vec();
        if let Some(r) = self.rows.first() {
            for (name, imp) in self.block_names.iter().zip(&r.importance) {
                h.extend((0..imp.len()).map(|e| format!("{name}:importance[{e}]")));
            }
        }
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), r.loss.to_string(), r.task_loss.to_string()];
            rec.push(r.balance_loss.to_string());
            rec.push(r.acc.to_string());
            rec.extend(r.importance.iter().flatten().map(f64::to_string));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// Mean over the last `window` steps of the per-block average balance
    /// loss.
    pub fn final_cv_squared(&self, window: usize) -> f64 {
        let blocks = self.block_names.len().max(1) as f64;
        let tail = &self.rows[self.rows.len().saturating_sub(window)..];
        tail.iter().map(|r| r.balance_loss / blocks).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Mean cross-entropy, its gradient with respect to the logits, and the
/// number of correct argmax predictions.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>, usize)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!("logits {s:?} for {} labels", labels.len())));
    }
    let (n, c) = (s[0], s[1]);
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut grad = Vec::with_capacity(n * c);
    let mut loss = T::zero();
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Shape(format!("label {y} for {c} classes")));
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let z = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
        loss = loss + (z.ln() + m - row[y]) * inv_n;
        grad.extend(row.iter().enumerate().map(|(j, &v)| {
            let p = (v - m).exp() / z;
            (if j == y { p - T::one() } else { p }) * inv_n
        }));
        let best = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        correct += usize::from(best == y);
    }
    Ok((loss, Tensor::new(vec![n, c], grad)?, correct))
}

/// Train `net` on freshly generated task data. Returns the trace; the
/// network is updated in place.
pub fn train_loop<T: Element>(net: &mut Network<T>, task: &SyntheticTask, tcfg: &TrainConfig) -> Result<TrainingTrace> {
    let (train, val) = generate_dataset::<T>(task)?;
    train_on(net, &train, (!val.is_empty()).then_some(&val), tcfg)
}

/// SGD with momentum on cross-entropy plus `lambda` times the summed balance
/// loss. Batches are drawn from per-epoch shuffles seeded by `tcfg.seed`.
pub fn train_on<T: Element>(
    net: &mut Network<T>,
    train: &Dataset<T>,
    val: Option<&Dataset<T>>,
    tcfg: &TrainConfig,
) -> Result<TrainingTrace> {
    tcfg.validate()?;
    if tcfg.batch_size > train.len() {
        return Err(Error::Shape(format!("batch size {} exceeds {} training samples", tcfg.batch_size, train.len())));
    }
    net.set_k(tcfg.k)?;
    net.set_bn_mode(BnMode::Training);
    let (lr, mu, lambda) = (T::from_f64(tcfg.lr), T::from_f64(tcfg.momentum), T::from_f64(tcfg.lambda));
    let mut velocity: Vec<Tensor<T>> = net.trainable_mut().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut rng = seeded(tcfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut counter = MacCounter::new();
    let mut trace = TrainingTrace {
        block_names: net.gated_block_names().into_iter().map(String::from).collect(),
        rows: Vec::with_capacity(tcfg.steps),
        evals: Vec::new(),
    };

    for step in 0..tcfg.steps {
        if cursor + tcfg.batch_size > order.len() {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = train.select(&order[cursor..cursor + tcfg.batch_size])?;
        cursor += tcfg.batch_size;

        let out = network_forward(net, &batch.images, Some(&batch.questions), &mut counter, tcfg.mode)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { step },
                e => e,
            })?;
        let (task_loss, grad_logits, correct) = softmax_cross_entropy(&out.logits, &batch.labels)?;
        let mut balance = T::zero();
        let mut imp_row = Vec::with_capacity(out.decisions.len());
        for decisions in &out.decisions {
            let gates: Vec<Vec<T>> = decisions.iter().map(|d| d.g_norm.clone()).collect();
            balance = balance + balance_loss(&gates)?;
            imp_row.push(importance(&gates)?.into_iter().map(T::as_f64).collect());
        }
        let loss = task_loss + lambda * balance;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = network_backward(net, &out.cache, &grad_logits, lambda)?;
        for ((p, v), g) in net.trainable_mut().into_iter().zip(&mut velocity).zip(&grads.params) {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv = *pv - lr * *vv;
            }
        }
        update_running_stats(net, &out.cache);
        trace.rows.push(TraceRow {
            step,
            loss: loss.as_f64(),
            task_loss: task_loss.as_f64(),
            balance_loss: balance.as_f64(),
            acc: correct as f64 / tcfg.batch_size as f64,
            importance: imp_row,
        });
        if let Some(v) = val {
            if tcfg.eval_every > 0 && (step + 1) % tcfg.eval_every == 0 {
                trace.evals.push((step + 1, evaluate(net, v, tcfg.k, tcfg.mode)?.accuracy));
            }
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Per gated block, mean entropy (nats) of the normalized gates.
    pub gate_entropy: Vec<f64>,
    /// Per gated block, how often each expert was among the top k.
    pub usage: Vec<Vec<u64>>,
    pub samples: usize,
}

const EVAL_CHUNK: usize = 256;

/// Accuracy and gate statistics with inference-mode batch norm at `k`
/// active experts. `net` itself is left untouched.
pub fn evaluate<T: Element>(net: &Network<T>, data: &Dataset<T>, k: usize, mode: ExecMode) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut net = net.clone();
    net.set_k(k)?;
    net.set_bn_mode(BnMode::Inference);
    let names = net.gated_block_names().len();
    let mut entropy = vec![0.0; names];
    let mut usage: Vec<Vec<u64>> = Vec::new();
    let mut correct = 0;
    let mut counter = MacCounter::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let part = data.select(chunk)?;
        let out = network_forward(&net, &part.images, Some(&part.questions), &mut counter, mode)?;
        let (_, _, c) = softmax_cross_entropy(&out.logits, &part.labels)?;
        correct += c;
        for (b, decisions) in out.decisions.iter().enumerate() {
            if usage.len() <= b {
                usage.push(vec![0; decisions[0].g_norm.len()]);
            }
            for d in decisions {
                entropy[b] += d.g_norm.iter().map(|g| g.as_f64()).filter(|&g| g > 0.0).map(|g| -g * g.ln()).sum::<f64>();
                for &e in &d.selected {
                    usage[b][e] += 1;
                }
            }
        }
    }
    let n = data.len();
    Ok(EvalReport {
        accuracy: correct as f64 / n as f64,
        gate_entropy: entropy.into_iter().map(|h| h / n as f64).collect(),
        usage,
        samples: n,
    })
}

/// Logits of `net` on `data` in inference mode, concatenated.
pub fn predict<T: Element>(net: &Network<T>, data: &Dataset<T>, k: usize, mode: ExecMode) -> Result<Tensor<T>> {
    let mut net = net.clone();
    net.set_k(k)?;
    net.set_bn_mode(BnMode::Inference);
    let mut counter = MacCounter::new();
    let mut logits = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let part = data.select(chunk)?;
        let out = network_forward(&net, &part.images, Some(&part.questions), &mut counter, mode)?;
        logits.extend_from_slice(out.logits.data());
    }
    let classes = logits.len() / data.len();
    Tensor::new(vec![data.len(), classes], logits)
}

#[cfg(test)]
mod tests;
