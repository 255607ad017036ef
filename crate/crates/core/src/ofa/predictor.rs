use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{backward_pass, Tape};
use crate::error::{Error, Result};
use crate::layers::{activation, linear, ActKind};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::train::{adam_step, AdamState};

pub const PREDICTOR_HIDDEN: usize = 400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            epochs: 200,
            lr: 1e-3,
            batch: 32,
            seed: 0,
        }
    }
}

/// Three linear layers (D→400→400→1) with ReLU between them.
#[derive(Clone, Debug)]
pub struct AccuracyPredictor {
    pub input_len: usize,
    store: ParamStore<f32>,
    layers: [(ParamId, ParamId); 3],
    /// Targets are standardized for training; predictions are mapped back.
    target_mean: f64,
    target_std: f64,
}

impl AccuracyPredictor {
    pub fn new(input_len: usize, seed: u64) -> Result<Self> {
        if input_len == 0 {
            return Err(Error::Spec("predictor input width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = [(input_len, PREDICTOR_HIDDEN), (PREDICTOR_HIDDEN, PREDICTOR_HIDDEN), (PREDICTOR_HIDDEN, 1)];
        let mut layers = Vec::new();
        for (i, &(din, dout)) in dims.iter().enumerate() {
            // the output layer starts at zero, so an untrained predictor returns the target mean
            let std = if i + 1 == dims.len() { 0.0 } else { (2.0 / din as f64).sqrt() };
            let normal = Normal::new(0.0, std).expect("valid std");
            let w = Tensor::from_fn(vec![din, dout], |_| normal.sample(&mut rng) as f32);
            let w = store.add(format!("fc{i}.weight"), ParamGroup::Weight, w)?;
            let b = store.add(format!("fc{i}.bias"), ParamGroup::Bias, Tensor::zeros(vec![dout]))?;
            store.set_trainable(w, true);
            store.set_trainable(b, true);
            layers.push((w, b));
        }
        Ok(AccuracyPredictor {
            input_len,
            store,
            layers: [layers[0], layers[1], layers[2]],
            target_mean: 0.0,
            target_std: 1.0,
        })
    }

    /// `D·400 + 400 + 400·400 + 400 + 400 + 1`.
    pub fn closed_form_params(input_len: usize) -> usize {
        let h = PREDICTOR_HIDDEN;
        input_len * h + h + h * h + h + h + 1
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Multiply-accumulates of one prediction.
    pub fn inference_macs(&self) -> u64 {
        let h = PREDICTOR_HIDDEN as u64;
        self.input_len as u64 * h + h * h + h
    }

    fn forward(&self, tape: &mut Tape<f32>, codes: &[Vec<f32>]) -> Result<crate::autograd::Var<f32>> {
        let flat: Vec<f32> = codes.iter().flatten().copied().collect();
        if codes.iter().any(|c| c.len() != self.input_len) {
            return Err(Error::Shape(format!("predictor expects codes of length {}", self.input_len)));
        }
        let x = tape.input(Tensor::new(vec![codes.len(), self.input_len], flat)?);
        let [(w0, b0), (w1, b1), (w2, b2)] = self.layers;
        let h = linear(tape, &self.store, &x, w0, Some(b0))?;
        let h = activation(tape, &h, ActKind::Relu)?;
        let h = linear(tape, &self.store, &h, w1, Some(b1))?;
        let h = activation(tape, &h, ActKind::Relu)?;
        linear(tape, &self.store, &h, w2, Some(b2))
    }

    pub fn predict_many(&self, codes: &[Vec<f32>]) -> Result<Vec<f64>> {
        if codes.is_empty() {
            return Ok(vec![]);
        }
        let out = self.forward(&mut Tape::inference(), codes)?;
        Ok(out
            .value
            .data()
            .iter()
            .map(|&y| y as f64 * self.target_std + self.target_mean)
            .collect())
    }

    pub fn predict(&self, code: &[f32]) -> Result<f64> {
        Ok(self.predict_many(&[code.to_vec()])?[0])
    }
}

/// Squared-error regression of accuracies on encodings.
pub fn predictor_train(pairs: &[(Vec<f32>, f64)], config: &PredictorConfig) -> Result<AccuracyPredictor> {
    if pairs.len() < 2 {
        return Err(Error::Contract(format!("predictor needs at least 2 pairs, got {}", pairs.len())));
    }
    if config.batch == 0 || !(config.lr > 0.0) {
        return Err(Error::Spec("predictor batch and lr must be positive".into()));
    }
    let d = pairs[0].0.len();
    let mut p = AccuracyPredictor::new(d, config.seed)?;
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|x| x.1).sum::<f64>() / n;
    let var = pairs.iter().map(|x| (x.1 - mean).powi(2)).sum::<f64>() / n;
    p.target_mean = mean;
    p.target_std = if var > 1e-12 { var.sqrt() } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut adam = AdamState::default();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let codes: Vec<Vec<f32>> = chunk.iter().map(|&i| pairs[i].0.clone()).collect();
            let mut tape = Tape::new();
            let out = p.forward(&mut tape, &codes)?;
            let m = chunk.len() as f32;
            let grad: Vec<f32> = out
                .value
                .data()
                .iter()
                .zip(chunk)
                .map(|(&y, &i)| 2.0 * (y - ((pairs[i].1 - p.target_mean) / p.target_std) as f32) / m)
                .collect();
            let grads = backward_pass(&mut tape, &p.store, &Tensor::new(vec![chunk.len(), 1], grad)?)?;
            adam_step(&mut p.store, &grads, &mut adam, config.lr)?;
        }
    }
    Ok(p)
}

/// Kendall rank correlation with tie correction (τ-b); 0 when either side
/// is constant.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "kendall_tau needs equal lengths");
    let (mut conc, mut disc, mut ties_a, mut ties_b, mut pairs) = (0i64, 0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            pairs += 1;
            let da = (a[i] - a[j]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal) as i64;
            let db = (b[i] - b[j]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal) as i64;
            match (da, db) {
                (0, 0) => {
                    ties_a += 1;
                    ties_b += 1;
                }
                (0, _) => ties_a += 1,
                (_, 0) => ties_b += 1,
                _ if da == db => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let denom = (((pairs - ties_a) * (pairs - ties_b)) as f64).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (conc - disc) as f64 / denom
    }
}
