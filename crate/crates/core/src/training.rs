//! Desk-scale supervised training: smoothed cross-entropy, AdamW, a warmup +
//! cosine schedule, stochastic depth and top-1 evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{smoothed_xent, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Module, Param, ParamId};
use crate::tensor::{stack, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub label_smoothing: f64,
    pub drop_path: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 2e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 5,
            warmup_epochs: 1,
            warmup_lr: 1e-6,
            min_lr: 1e-6,
            label_smoothing: 0.1,
            drop_path: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !positive(self.base_lr) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !positive(self.min_lr) || (self.warmup_epochs > 0 && !positive(self.warmup_lr)) {
            return bad("min_lr and warmup_lr must be positive".into());
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || !positive(self.eps) {
            return bad("weight_decay must be non-negative and eps positive".into());
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("label_smoothing", self.label_smoothing),
            ("drop_path", self.drop_path),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            min_lr: self.min_lr,
            warmup_lr: self.warmup_lr,
            warmup_steps: self.warmup_epochs * steps_per_epoch,
            total_steps: self.epochs * steps_per_epoch,
        }
    }
}

/// Base learning rate scaled linearly with the batch: `batch/512 × 5e-4`.
/// False for NaN as well as for non-positive values.
fn positive(x: f64) -> bool {
    x > 0.0
}

pub fn scaled_base_lr(batch_size: usize) -> f64 {
    batch_size as f64 / 512.0 * 5e-4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    /// Number of optimizer steps; the last one is `total_steps - 1`.
    pub total_steps: usize,
}

/// Linear warmup from `warmup_lr` to `base_lr`, then cosine decay reaching
/// `min_lr` at the final step. Endpoints are exact.
pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        let a = step as f64 / s.warmup_steps as f64;
        return s.warmup_lr * (1.0 - a) + s.base_lr * a;
    }
    let last = s.total_steps.saturating_sub(1);
    let span = last.saturating_sub(s.warmup_steps);
    let p = if span == 0 {
        f64::from(u8::from(step > s.warmup_steps))
    } else {
        ((step - s.warmup_steps) as f64 / span as f64).min(1.0)
    };
    let w = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    s.base_lr * w + s.min_lr * (1.0 - w)
}

/// Mean over the batch of `−Σ_k q_k log softmax(z)_k` with
/// `q = (1−eps)·onehot + eps/K`.
pub fn cross_entropy_smoothed(logits: &Tensor, labels: &[usize], eps: f64) -> Result<f64> {
    smoothed_xent(logits, labels, eps).map(|(loss, _)| loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        AdamW {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<ParamId, Tensor>,
    pub v: BTreeMap<ParamId, Tensor>,
}

/// Weight decay applies to matrices and higher-rank weights only; biases,
/// norm parameters and the positional table are exempt.
pub fn decays(name: &str, p: &Param) -> bool {
    p.value.rank() >= 2 && !name.ends_with("pos_embed")
}

/// One AdamW update of every parameter that has a gradient. Decay is
/// decoupled: `θ ← θ − lr·wd·θ`, then `θ ← θ − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step<M: Module + ?Sized>(
    params: &mut M,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &AdamW,
    lr: f64,
) -> Result<()> {
    if !positive(lr) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    // shape check first so a failure leaves everything untouched
    let mut err = None;
    params.visit("", &mut |_, p| {
        if let Some(g) = grads.param(p.id()) {
            if g.shape() != p.value.shape() && err.is_none() {
                err = Some(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    params.visit_mut("", &mut |name, p| {
        let Some(g) = grads.param(p.id()) else {
            return;
        };
        let m = state.m.entry(p.id()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(p.id()).or_insert_with(|| Tensor::zeros(g.shape()));
        let wd = if decays(name, p) { cfg.weight_decay } else { 0.0 };
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (theta, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *theta *= 1.0 - lr * wd;
            *theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    });
    Ok(())
}

/// Images `[H, W, C]` with integer labels in `[0, num_classes)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if images.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let shape = images[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::InvalidShape {
                op: "dataset",
                detail: format!("images must be [H, W, C], got {shape:?}"),
            });
        }
        if let Some(img) = images.iter().find(|t| t.shape() != shape.as_slice()) {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: shape,
                rhs: img.shape().to_vec(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Stacks the selected samples into `[B, H, W, C]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let imgs: Vec<&Tensor> = indices.iter().map(|&i| &self.images[i]).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((stack(&imgs, 0)?, labels))
    }
}

/// Two classes of striped images with additive noise. Class 0 has
/// horizontal stripes on the red channel, class 1 vertical stripes on the
/// green channel; stripe phase, period and amplitude are random. The
/// per-channel means separate the classes linearly.
pub fn synthetic_bars(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let period = rng.random_range(2..=4usize);
        let phase = rng.random_range(0..period);
        let amp = rng.random_range(0.5..1.5);
        let noise = Tensor::randn(&[size, size, 3], &mut rng);
        let img = Tensor::from_fn(&[size, size, 3], |k| {
            let (r, c, ch) = (k / (3 * size), (k / 3) % size, k % 3);
            let along = if label == 0 { r } else { c };
            let on = (along + phase) % period == 0;
            let signal = if ch == label && on { amp } else { 0.0 };
            signal + 0.3 * noise.data()[k]
        });
        images.push(img);
        labels.push(label);
    }
    Dataset::new(images, labels, 2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochMetrics>,
}

impl History {
    /// CSV with header `epoch,lr,train_loss,train_acc,eval_acc`; a missing
    /// eval accuracy is an empty field.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.epochs {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 32;

/// Top-1 accuracy in eval mode (no stochastic depth).
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_classes(model, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.logits(&x)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks_exact(k).zip(&labels) {
            correct += usize::from(argmax(row) == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn check_classes(model: &Model, data: &Dataset) -> Result<()> {
    if data.num_classes > model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model predicts {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    Ok(())
}

/// Mini-batch AdamW training. Shuffling and stochastic depth draw from one
/// RNG seeded by `cfg.seed`, so identical inputs give identical histories.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, eval: Option<&Dataset>) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_classes(model, data)?;
    model.set_drop_path(cfg.drop_path);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(steps_per_epoch);
    let opt = AdamW::from(cfg);
    let mut state = OptimizerState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let epoch_lr = lr_at(step, &schedule);
        let mut weighted = Vec::with_capacity(steps_per_epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(chunk)?;
            let mut tape = Tape::new();
            let input = Var::constant(x);
            let logits = model.forward(&mut tape, &input, Some(&mut rng))?;
            let loss = tape.cross_entropy(&logits, &labels, cfg.label_smoothing)?;
            weighted.push(loss.value().item() * chunk.len() as f64);
            let grads = tape.backward(&loss)?;
            drop(tape);
            adamw_step(model, &grads, &mut state, &opt, lr_at(step, &schedule))?;
            step += 1;
        }
        let train_loss = crate::tensor::pairwise_sum(&weighted) / data.len() as f64;
        let train_acc = evaluate(model, data)?;
        let eval_acc = eval.map(|d| evaluate(model, d)).transpose()?;
        history.epochs.push(EpochMetrics {
            epoch,
            lr: epoch_lr,
            train_loss,
            train_acc,
            eval_acc,
        });
    }
    Ok(history)
}
