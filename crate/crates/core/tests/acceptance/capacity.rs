use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tinytl::autograd::{ParamSlice, Tape, Var};
use tinytl::blocks::{build_backbone, ArchitectureSpec, Ctx, Exec, InitStrategy, Model};
use tinytl::io::{synth_dataset, Dataset, SynthSpec};
use tinytl::layers::{ActKind, ConvSpec, WeightView};
use tinytl::memory::{quantize8, quantize_frozen};
use tinytl::params::{ParamId, ParamStore};
use tinytl::tensor::Tensor;
use tinytl::train::{evaluate, pretrain_source, train, FineTunePolicy, SourcePretrain, TrainConfig};

use crate::Outcome;

const SEEDS: u64 = 5;
const LRS: [f64; 3] = [1e-2, 3e-3, 1e-3];
const EPOCHS: usize = 25;
const SIZE: usize = 16;

/// Pretrained backbone transferred to four unseen synthetic classes under
/// four policies.
pub struct CapacityStudy {
    model: Model,
    test: Dataset,
    /// Best-lr mean accuracy per policy, with the lr.
    best: Vec<(FineTunePolicy, f64, f64)>,
    /// TinyTL-L+B stores and accuracies at its best lr, one per seed.
    lb_runs: Vec<(ParamStore<f32>, f64)>,
    pretrained: ParamStore<f32>,
    arch: ArchitectureSpec,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn train_set(seed: u64) -> Dataset {
    synth_dataset(&SynthSpec::new(4, 50, SIZE, 200 + seed)).unwrap()
}

impl CapacityStudy {
    pub fn run() -> Self {
        let mut arch = ArchitectureSpec::reference_tiny();
        arch.resolution = SIZE;
        let (pretrained, _) = pretrain_source(&arch, &SourcePretrain::default()).unwrap();
        let test = synth_dataset(&SynthSpec::new(4, 50, SIZE, 300)).unwrap();
        let (model, _) = build_backbone(&arch, &InitStrategy::RandomZeroScale, 0).unwrap();
        let policies = [
            FineTunePolicy::FtFull,
            FineTunePolicy::TinyTlLB,
            FineTunePolicy::TinyTlB,
            FineTunePolicy::FtLast,
        ];
        let mut best = Vec::new();
        let mut lb_runs = Vec::new();
        for policy in policies {
            let mut top: Option<(f64, f64, Vec<(ParamStore<f32>, f64)>)> = None;
            for lr in LRS {
                let runs: Vec<(ParamStore<f32>, f64)> = (0..SEEDS)
                    .map(|seed| {
                        let (m, mut s) = build_backbone(&arch, &InitStrategy::PretrainedCopy(pretrained.clone()), seed).unwrap();
                        train(&m, &mut s, &train_set(seed), &policy, &TrainConfig::new(EPOCHS, 8, lr, seed)).unwrap();
                        let acc = evaluate(&m, &s, &test, 50).unwrap();
                        (s, acc)
                    })
                    .collect();
                let m = mean(&runs.iter().map(|r| r.1).collect::<Vec<_>>());
                if top.as_ref().is_none_or(|t| m > t.0) {
                    top = Some((m, lr, runs));
                }
            }
            let (m, lr, runs) = top.unwrap();
            if policy == FineTunePolicy::TinyTlLB {
                lb_runs = runs;
            }
            best.push((policy, m, lr));
        }
        CapacityStudy {
            model,
            test,
            best,
            lb_runs,
            pretrained,
            arch,
        }
    }

    fn best_of(&self, p: &FineTunePolicy) -> (f64, f64) {
        let b = self.best.iter().find(|b| &b.0 == p).unwrap();
        (b.1, b.2)
    }

    pub fn criterion_8(&self, secs: f64) -> Outcome {
        let acc = |p| self.best_of(&p).0;
        let (full, lb, b, last) = (
            acc(FineTunePolicy::FtFull),
            acc(FineTunePolicy::TinyTlLB),
            acc(FineTunePolicy::TinyTlB),
            acc(FineTunePolicy::FtLast),
        );
        let ordered = full >= lb && lb >= b && b >= last;
        let gap = 100.0 * (lb - last);
        let parts: Vec<String> = self.best.iter().map(|(p, m, lr)| format!("{p} {:.1}% (lr {lr:e})", 100.0 * m)).collect();
        Outcome::new(
            ordered && gap >= 10.0 && secs < 1800.0,
            format!(
                "best-lr means over {SEEDS} seeds: {}; ordered: {ordered}; L+B - Last = {gap:.1} points; {secs:.0}s",
                parts.join(", ")
            ),
        )
    }

    pub fn criterion_9(&self) -> Outcome {
        let (lb8, lr8) = self.best_of(&FineTunePolicy::TinyTlLB);
        // square-root batch scaling for Adam: 8x the steps at lr/sqrt(8)
        let lr = lr8 / 8f64.sqrt();
        let mut accs = Vec::new();
        let mut gn_ok = true;
        let mut gn_nodes = 0;
        for seed in 0..SEEDS {
            let (m, mut s) = build_backbone(&self.arch, &InitStrategy::PretrainedCopy(self.pretrained.clone()), seed).unwrap();
            train(&m, &mut s, &train_set(seed), &FineTunePolicy::TinyTlLB, &TrainConfig::new(EPOCHS, 1, lr, seed)).unwrap();
            accs.push(evaluate(&m, &s, &self.test, 50).unwrap());
            let (n, same) = gn_batch_independent(&self.model, &s, &self.test);
            gn_nodes += n;
            gn_ok &= same && n > 0;
        }
        let lb1 = mean(&accs);
        let delta = 100.0 * (lb1 - lb8).abs();
        Outcome::new(
            gn_ok && delta <= 5.0,
            format!(
                "batch-1 L+B {:.1}% at lr {lr:.2e} vs batch-8 {:.1}% (|delta| {delta:.1} <= 5 points); {gn_nodes} group-norm outputs per-sample identical: {gn_ok}",
                100.0 * lb1,
                100.0 * lb8
            ),
        )
    }

    pub fn criterion_12(&self) -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst_steps = 0f64;
        for i in 0..200 {
            let scale = 10f32.powi(i % 7 - 3);
            let offset = rng.gen_range(-2.0..2.0) * scale;
            let n = rng.gen_range(1..500);
            let w = Tensor::from_fn(vec![n], |_| offset + rng.gen_range(-1.0f32..1.0) * scale);
            let q = quantize8(&w).unwrap();
            let d = q.dequantize();
            let step = q.scale() as f64;
            let err = w.data().iter().zip(d.data()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
            if step > 0.0 {
                worst_steps = worst_steps.max(err / step);
            }
        }
        // a few ulps of the tensor's magnitude above the ideal half step
        let bound_ok = worst_steps <= 0.5 + 1e-3;
        let deltas: Vec<f64> = self
            .lb_runs
            .iter()
            .map(|(s, acc)| evaluate(&self.model, &quantize_frozen(s).unwrap(), &self.test, 50).unwrap() - acc)
            .collect();
        let delta = 100.0 * mean(&deltas).abs();
        Outcome::new(
            bound_ok && delta <= 1.0,
            format!(
                "worst reconstruction error {worst_steps:.4} steps over 200 tensors; frozen 8-bit weights change L+B accuracy by {:+.2} points (per seed {:?})",
                100.0 * mean(&deltas),
                deltas.iter().map(|d| (1000.0 * d).round() / 10.0).collect::<Vec<_>>()
            ),
        )
    }
}

/// Records every group-norm output of an ordinary tape forward.
struct GnProbe<'a> {
    exec: Exec<'a, f32>,
    outputs: Vec<Tensor<f32>>,
}

impl Ctx<f32> for GnProbe<'_> {
    type V = Var<f32>;

    fn store(&self) -> &ParamStore<f32> {
        self.exec.store()
    }
    fn dims(&self, v: &Var<f32>) -> Vec<usize> {
        self.exec.dims(v)
    }
    fn conv(&mut self, n: &str, x: &Var<f32>, s: &ConvSpec, w: &WeightView, b: ParamSlice, ws: bool) -> tinytl::Result<Var<f32>> {
        self.exec.conv(n, x, s, w, b, ws)
    }
    fn group_norm(&mut self, n: &str, x: &Var<f32>, g: ParamSlice, b: ParamSlice) -> tinytl::Result<Var<f32>> {
        let y = self.exec.group_norm(n, x, g, b)?;
        self.outputs.push(y.value.clone());
        Ok(y)
    }
    fn frozen_norm(&mut self, n: &str, x: &Var<f32>, a: [ParamSlice; 4]) -> tinytl::Result<Var<f32>> {
        self.exec.frozen_norm(n, x, a)
    }
    fn act(&mut self, n: &str, x: &Var<f32>, k: ActKind) -> tinytl::Result<Var<f32>> {
        self.exec.act(n, x, k)
    }
    fn pool(&mut self, n: &str, x: &Var<f32>) -> tinytl::Result<Var<f32>> {
        self.exec.pool(n, x)
    }
    fn upsample(&mut self, n: &str, x: &Var<f32>, h: usize, w: usize) -> tinytl::Result<Var<f32>> {
        self.exec.upsample(n, x, h, w)
    }
    fn add(&mut self, n: &str, a: &Var<f32>, b: &Var<f32>) -> tinytl::Result<Var<f32>> {
        self.exec.add(n, a, b)
    }
    fn channel_constant(&mut self, n: &str, like: &Var<f32>, v: ParamSlice) -> tinytl::Result<Var<f32>> {
        self.exec.channel_constant(n, like, v)
    }
    fn global_pool(&mut self, n: &str, x: &Var<f32>) -> tinytl::Result<Var<f32>> {
        self.exec.global_pool(n, x)
    }
    fn linear(&mut self, n: &str, x: &Var<f32>, w: ParamId, b: ParamId) -> tinytl::Result<Var<f32>> {
        self.exec.linear(n, x, w, b)
    }
}

fn gn_outputs(model: &Model, store: &ParamStore<f32>, images: Tensor<f32>) -> Vec<Tensor<f32>> {
    let mut tape = Tape::new();
    let x = tape.input(images);
    let mut probe = GnProbe {
        exec: Exec::new(&mut tape, store),
        outputs: Vec::new(),
    };
    model.forward(&mut probe, &x).unwrap();
    probe.outputs
}

/// Group-norm outputs of an 8-image batch against each image run alone;
/// returns (outputs compared, all bit-identical).
fn gn_batch_independent(model: &Model, store: &ParamStore<f32>, data: &Dataset) -> (usize, bool) {
    let idx: Vec<usize> = (0..8).collect();
    let (x, _) = data.batch(&idx).unwrap();
    let together = gn_outputs(model, store, x);
    let mut same = true;
    for i in idx {
        let (xi, _) = data.batch(&[i]).unwrap();
        let alone = gn_outputs(model, store, xi);
        same &= alone.len() == together.len();
        for (a, t) in alone.iter().zip(&together) {
            let per = a.data().len();
            same &= a.data().iter().zip(&t.data()[i * per..(i + 1) * per]).all(|(u, v)| u.to_bits() == v.to_bits());
        }
    }
    (together.len() * 8, same)
}
