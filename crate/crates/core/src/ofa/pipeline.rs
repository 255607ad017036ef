use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evolve::{evolve, SearchConfig};
use super::extract::{materialize, Supernet};
use super::predictor::{predictor_train, PredictorConfig};
use super::space::SubNetConfig;
use crate::autograd::{backward_pass, Tape};
use crate::blocks::Model;
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::layers::bilinear_upsample;
use crate::memory::{analyze, CostReport};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{
    adam_step_sparse, apply_policy, cosine_lr, softmax_cross_entropy, train, AdamState, FineTunePolicy,
    TrainConfig, TrainReport,
};

/// Scores a sub-network. Implementations must not record a backward graph.
pub trait AccuracyOracle {
    fn accuracy(&mut self, config: &SubNetConfig, model: &Model, store: &ParamStore<f32>) -> Result<f64>;

    /// Images pushed through the network per call; zero for synthetic oracles.
    fn samples(&self) -> usize {
        0
    }

    /// Largest saved-activation total any evaluation recorded.
    fn peak_saved_bytes(&self) -> u64 {
        0
    }
}

/// Images resized (up) to `resolution`.
fn at_resolution(x: Tensor<f32>, resolution: usize) -> Result<Tensor<f32>> {
    let (_, _, h, w) = x.dims4()?;
    if h == resolution && w == resolution {
        return Ok(x);
    }
    let mut tape = Tape::inference();
    let v = tape.input(x);
    Ok(bilinear_upsample(&mut tape, &v, resolution, resolution)?.value)
}

/// `data` with every image bilinearly enlarged to `resolution` and rounded
/// back to 8 bits.
pub fn upsampled(data: &Dataset, resolution: usize) -> Result<Dataset> {
    let n = data.len();
    let x = Tensor::new(
        vec![n, data.channels, data.height, data.width],
        data.pixels.iter().map(|&p| p as f32).collect(),
    )?;
    let y = at_resolution(x, resolution)?;
    let pixels = y.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Dataset::new(data.channels, resolution, resolution, data.n_classes, pixels, data.labels.clone())
}

/// Top-1 accuracy on a held-out set, forward only.
pub struct ValidationOracle<'a> {
    pub data: &'a Dataset,
    pub batch: usize,
    peak: u64,
}

impl<'a> ValidationOracle<'a> {
    pub fn new(data: &'a Dataset, batch: usize) -> Self {
        ValidationOracle { data, batch, peak: 0 }
    }
}

impl AccuracyOracle for ValidationOracle<'_> {
    fn accuracy(&mut self, config: &SubNetConfig, model: &Model, store: &ParamStore<f32>) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::Contract("validation set is empty".into()));
        }
        let idx: Vec<usize> = (0..self.data.len()).collect();
        let mut correct = 0usize;
        for chunk in idx.chunks(self.batch.max(1)) {
            let (x, y) = self.data.batch(chunk)?;
            let x = at_resolution(x, config.resolution)?;
            let mut tape = Tape::inference();
            let logits = model.logits(&mut tape, store, x)?;
            self.peak = self.peak.max(tape.peak_bytes());
            let k = logits.value.shape()[1];
            for (row, &label) in logits.value.data().chunks(k).zip(&y) {
                let best = (0..k).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                correct += (best == label) as usize;
            }
        }
        Ok(correct as f64 / self.data.len() as f64)
    }

    fn samples(&self) -> usize {
        self.data.len()
    }

    fn peak_saved_bytes(&self) -> u64 {
        self.peak
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<(SubNetConfig, f64)>,
    /// Forward MACs spent scoring every pair.
    pub mac: u64,
    pub peak_saved_bytes: u64,
}

/// Scores `n` seeded sub-networks of the shared weights.
pub fn collect_pairs(supernet: &Supernet, oracle: &mut dyn AccuracyOracle, n: usize, seed: u64) -> Result<PairSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    let mut mac = 0u64;
    for _ in 0..n {
        let config = supernet.space.sample(&mut rng);
        let model = supernet.extract(&config)?;
        let acc = oracle.accuracy(&config, &model, &supernet.store)?;
        let per_sample = analyze(&model, &supernet.store, 1, config.resolution)?.inference_mac;
        mac += per_sample * oracle.samples() as u64;
        pairs.push((config, acc));
    }
    Ok(PairSet {
        pairs,
        mac,
        peak_saved_bytes: oracle.peak_saved_bytes(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Supernet fine-tuning epochs over the 80% split.
    pub supernet_epochs: usize,
    pub final_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub pairs: usize,
    pub predictor: PredictorConfig,
    pub search: SearchConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            supernet_epochs: 1,
            final_epochs: 1,
            batch: 8,
            lr: 3e-3,
            pairs: 500,
            predictor: PredictorConfig::default(),
            search: SearchConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub phase: String,
    /// Images processed, counting every pass.
    pub samples: u64,
    pub mac: u64,
    pub peak_saved_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub best: SubNetConfig,
    pub predicted_accuracy: f64,
    /// Largest phase-1 footprint and the sub-network that produced it.
    pub supernet_peak_config: Option<SubNetConfig>,
    pub phases: Vec<PhaseCost>,
    pub total_mac: u64,
    pub final_train: TrainReport,
    /// Analytic cost of the final model under the fine-tuning policy.
    pub final_cost: CostReport,
}

fn split(data: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (data.len() / 5).max(1);
    if data.len() < 2 {
        return Err(Error::Contract("need at least 2 samples to split off a validation set".into()));
    }
    let (val, tr) = idx.split_at(n_val);
    Ok((data.subset(tr)?, data.subset(val)?))
}

/// Phase 1: one random sub-network per step, trained under TinyTL-L+B.
fn supernet_finetune(supernet: &mut Supernet, data: &Dataset, config: &AdaptConfig) -> Result<(PhaseCost, Option<SubNetConfig>)> {
    apply_policy(&mut supernet.store, &FineTunePolicy::TinyTlLB)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = AdamState::default();
    let total = data.len().div_ceil(config.batch) * config.supernet_epochs;
    let mut cost = PhaseCost {
        phase: "supernet-finetune".into(),
        ..Default::default()
    };
    let mut peak_config = None;
    let mut step = 0;
    for _ in 0..config.supernet_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let sub = supernet.space.sample(&mut rng);
            let model = supernet.extract(&sub)?;
            let (x, y) = data.batch(chunk)?;
            let x = at_resolution(x, sub.resolution)?;
            let mut tape = Tape::new();
            let logits = model.logits(&mut tape, &supernet.store, x)?;
            let (loss, g) = softmax_cross_entropy(&logits.value, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite supernet loss at step {step}")));
            }
            if tape.peak_bytes() > cost.peak_saved_bytes || peak_config.is_none() {
                cost.peak_saved_bytes = tape.peak_bytes();
                peak_config = Some(sub.clone());
            }
            let per_step = analyze(&model, &supernet.store, chunk.len(), sub.resolution)?;
            cost.mac += per_step.training_mac;
            cost.samples += chunk.len() as u64;
            let grads = backward_pass(&mut tape, &supernet.store, &g)?;
            adam_step_sparse(&mut supernet.store, &grads, &mut adam, cosine_lr(step, total, config.lr))?;
            step += 1;
        }
    }
    Ok((cost, peak_config))
}

/// Supernet fine-tune, then pair collection, predictor and search, then a
/// final fine-tune of the winner on all training data. `oracle` scores
/// sub-networks in phase 2; `None` uses accuracy on the 20% split.
pub fn adapt_pipeline(
    supernet: &mut Supernet,
    data: &Dataset,
    config: &AdaptConfig,
    oracle: Option<&mut dyn AccuracyOracle>,
) -> Result<(SubNetConfig, Model, ParamStore<f32>, AdaptReport)> {
    if config.batch == 0 {
        return Err(Error::Spec("batch must be positive".into()));
    }
    let (train_split, val_split) = split(data, config.seed)?;
    let (phase1, peak_config) = supernet_finetune(supernet, &train_split, config)?;

    let mut default_oracle = ValidationOracle::new(&val_split, config.batch.max(16));
    let oracle: &mut dyn AccuracyOracle = match oracle {
        Some(o) => o,
        None => &mut default_oracle,
    };
    let pairs = collect_pairs(supernet, oracle, config.pairs, config.seed ^ 0x51ed)?;
    let encoded: Vec<(Vec<f32>, f64)> = pairs
        .pairs
        .iter()
        .map(|(c, a)| supernet.space.encode(c).map(|e| (e, *a)))
        .collect::<Result<_>>()?;
    let predictor = predictor_train(&encoded, &PredictorConfig {
        seed: config.seed,
        ..config.predictor.clone()
    })?;
    let search = SearchConfig {
        seed: config.seed,
        ..config.search.clone()
    };
    let space = supernet.space.clone();
    let outcome = evolve(&space, &search, |c| predictor.predict(&space.encode(c)?))?;
    let predictor_mac = predictor.inference_macs() * (encoded.len() as u64 * config.predictor.epochs as u64 * 3 + outcome.evaluated as u64);
    let phase2 = PhaseCost {
        phase: "search".into(),
        samples: (pairs.pairs.len() * oracle.samples()) as u64,
        mac: pairs.mac + predictor_mac,
        peak_saved_bytes: pairs.peak_saved_bytes,
    };

    let (model, mut store) = materialize(supernet, &outcome.best)?;
    let resized;
    let data = if data.height == outcome.best.resolution && data.width == outcome.best.resolution {
        data
    } else {
        resized = upsampled(data, outcome.best.resolution)?;
        &resized
    };
    let policy = FineTunePolicy::TinyTlLB;
    let tc = TrainConfig::new(config.final_epochs, config.batch, config.lr, config.seed);
    let final_train = train(&model, &mut store, data, &policy, &tc)?;
    let final_cost = analyze(&model, &store, config.batch, outcome.best.resolution)?;
    let per_sample = analyze(&model, &store, 1, outcome.best.resolution)?.training_mac;
    let samples = (data.len() * config.final_epochs) as u64;
    let phase3 = PhaseCost {
        phase: "final-finetune".into(),
        samples,
        mac: per_sample * samples,
        peak_saved_bytes: final_train.peak_saved_bytes,
    };
    let phases = vec![phase1, phase2, phase3];
    let report = AdaptReport {
        best: outcome.best.clone(),
        predicted_accuracy: outcome.best_score,
        supernet_peak_config: peak_config,
        total_mac: phases.iter().map(|p| p.mac).sum(),
        phases,
        final_train,
        final_cost,
    };
    Ok((outcome.best, model, store, report))
}
