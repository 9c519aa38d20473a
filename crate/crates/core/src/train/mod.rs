//! Deterministic training and evaluation.

mod data;
mod optim;

pub use data::{synth_dataset, Dataset, Motif, SynthSpec, SYNTH_CHANNELS, SYNTH_SIZE};
pub use optim::{adamw_update, clip_grad_norm, AdamW, AdamWConfig, Moments};

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::AdapterKind;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` picks 1e-3 for PEFT recipes and 1e-4 for `full`.
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm cap; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: None,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("train.learning_rate must be positive, got {lr}")));
            }
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("train.betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.eps must be positive and train.weight_decay non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("train.grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn lr_for(&self, kind: AdapterKind) -> f64 {
        self.learning_rate.unwrap_or(match kind {
            AdapterKind::Full => 1e-4,
            _ => 1e-3,
        })
    }

    pub fn adamw(&self, kind: AdapterKind) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr_for(kind),
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Number of rows whose argmax equals the label (first index wins ties).
pub fn count_correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = logits.shape()[logits.shape().len() - 1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy and mean cross-entropy. Never mutates the model.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T>(chunk)?;
        let logits = model.predict(&x)?;
        correct += count_correct(&logits, &y);
        let classes = logits.shape()[1];
        let (l, _) = crate::kernels::cross_entropy_forward(logits.data(), &y, classes);
        loss += l.to_f64() * chunk.len() as f64;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
    })
}

/// Trains the model's trainable set and returns per-epoch metrics
/// (a train row, then an eval row when `eval` is given).
///
/// Mini-batch order comes from a ChaCha stream seeded with `cfg.seed`, so the
/// whole history is reproducible.
pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let mut opt = AdamW::new(cfg.adamw(model.recipe().kind));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch::<T>(chunk)?;
            model.store.zero_grads();
            let (loss, logits) = match model_step(model, &x, &y) {
                Err(Error::NonFinite { .. }) => return Err(Error::NanLoss { epoch, step }),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, step });
            }
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut model.store, max);
            }
            opt.step(&mut model.store)?;
            loss_sum += loss.to_f64() * chunk.len() as f64;
            correct += count_correct(&logits, &y);
            step += 1;
        }
        model.store.zero_grads();
        let row = EpochMetrics {
            epoch,
            split: Split::Train,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        on_epoch(&row);
        history.push(row);
        if let Some(ev) = eval {
            let e = evaluate(model, ev, cfg.batch_size)?;
            let row = EpochMetrics {
                epoch,
                split: Split::Eval,
                loss: e.loss,
                accuracy: e.accuracy,
            };
            on_epoch(&row);
            history.push(row);
        }
    }
    Ok(history)
}

fn model_step<T: Real>(model: &mut Model<T>, x: &Tensor<T>, y: &[usize]) -> Result<(T, Tensor<T>)> {
    let mut tape = crate::Tape::new();
    let out = model.forward(&mut tape, x, false)?;
    let logits = tape.to_tensor(out.logits);
    let loss = tape.cross_entropy(out.logits, y)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Ok((value, logits));
    }
    tape.backward(loss)?;
    out.bindings.accumulate_into(&tape, &mut model.store)?;
    Ok((value, logits))
}
