use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, cosine_lr, AdamState};
use super::policy::{apply_policy, FineTunePolicy};
use crate::autograd::{backward_pass, Tape};
use crate::blocks::Model;
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::memory::analyze;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch: usize, lr: f64, seed: u64) -> Self {
        TrainConfig { epochs, batch, lr, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Contract(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub policy: String,
    pub config: TrainConfig,
    pub steps: usize,
    pub trainable_params: usize,
    pub frozen_params: usize,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub final_train_acc: f64,
    /// Largest saved-activation total held by any step's tape.
    pub peak_saved_bytes: u64,
    /// The analytic saved-activation total at the full batch size.
    pub analytic_saved_bytes: u64,
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut grad = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        if y >= k {
            return Err(Error::Contract(format!("label {y} outside {k} classes")));
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[y].as_f64() - max);
        for (j, e) in exps.iter().enumerate() {
            let p = e / z - if j == y { 1.0 } else { 0.0 };
            grad.push(T::from_f64(p / n as f64));
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy without recording anything.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.predict(store, x)?;
        let k = logits.shape()[1];
        correct += logits
            .data()
            .chunks(k)
            .zip(&y)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Fine-tunes `store` in place under `policy`.
///
/// Every step's tape is checked against the analytic footprint for its batch
/// size; any difference is a structural error.
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    data: &Dataset,
    policy: &FineTunePolicy,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if data.n_classes != model.arch.head.n_classes {
        return Err(Error::Contract(format!(
            "dataset has {} classes, head has {}",
            data.n_classes, model.arch.head.n_classes
        )));
    }
    if data.is_empty() || data.height != data.width {
        return Err(Error::Contract("training needs a nonempty dataset of square images".into()));
    }
    let plan = apply_policy(store, policy)?;
    let res = data.height;
    let mut analytic = BTreeMap::new();
    let steps_per_epoch = data.len().div_ceil(config.batch);
    let total = steps_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut peak = 0;
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch) {
            let (x, y) = data.batch(chunk)?;
            let mut tape = Tape::new();
            let logits = model.logits(&mut tape, store, x)?;
            let (loss, g) = softmax_cross_entropy(&logits.value, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch}, step {step} (lr {})",
                    config.lr
                )));
            }
            let want = match analytic.get(&chunk.len()) {
                Some(&b) => b,
                None => {
                    let b = analyze(model, store, chunk.len(), res)?.memory.totals.saved_activation_bytes;
                    analytic.insert(chunk.len(), b);
                    b
                }
            };
            if tape.peak_bytes() != want {
                return Err(Error::Structural(format!(
                    "step {step}: tape holds {} saved bytes, analytic model says {want}",
                    tape.peak_bytes()
                )));
            }
            peak = peak.max(tape.peak_bytes());
            let grads = backward_pass(&mut tape, store, &g)?;
            adam_step(store, &grads, &mut adam, cosine_lr(step, total, config.lr))?;
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        curve.push(epoch_loss / data.len() as f64);
    }
    let analytic_full = match analytic.get(&config.batch.min(data.len())) {
        Some(&b) => b,
        None => analyze(model, store, config.batch.min(data.len()), res)?.memory.totals.saved_activation_bytes,
    };
    Ok(TrainReport {
        policy: policy.to_string(),
        config: config.clone(),
        steps: step,
        trainable_params: plan.trainable_params,
        frozen_params: plan.frozen_params,
        loss_curve: curve,
        final_train_acc: evaluate(model, store, data, config.batch)?,
        peak_saved_bytes: peak,
        analytic_saved_bytes: analytic_full,
    })
}
