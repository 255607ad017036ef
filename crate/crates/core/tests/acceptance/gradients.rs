use std::time::Instant;

use tinytl::autograd::{backward_pass, SaveMode, Tape};
use tinytl::blocks::ArchitectureSpec;
use tinytl::gradcheck::{finite_diff_check, model_gradcheck, seeded_setup, Probe};
use tinytl::layers::{activation, linear, ActKind};
use tinytl::params::{ParamGroup, ParamId, ParamStore};
use tinytl::tensor::{Real, Tensor};
use tinytl::train::FineTunePolicy;

use crate::Outcome;

const EPS: f64 = 1e-5;
const F32_BOUND: f64 = 1e-4;
const F64_BOUND: f64 = 1e-6;

/// linear → activation → linear with a weighted-square loss; covers the
/// activations the backbones never use.
fn activation_chain<T: Real>(store: &ParamStore<T>, ids: [ParamId; 4], kind: ActKind, mode: SaveMode) -> (Tape<T>, f64, Tensor<T>) {
    let mut t = Tape::with_mode(mode);
    let x = t.input(Tensor::from_fn(vec![3, 4], |i| T::from_f64(((i * 7 % 11) as f64 - 5.0) * 0.6)));
    let h = linear(&mut t, store, &x, ids[0], Some(ids[1])).unwrap();
    let h = activation(&mut t, &h, kind).unwrap();
    let y = linear(&mut t, store, &h, ids[2], Some(ids[3])).unwrap();
    let v: Vec<f64> = y.value.data().iter().map(|v| v.as_f64()).collect();
    let loss = v.iter().enumerate().map(|(i, a)| a * a * (1.0 + i as f64 * 0.1)).sum();
    let g = Tensor::from_fn(y.value.shape().to_vec(), |i| T::from_f64(2.0 * v[i] * (1.0 + i as f64 * 0.1)));
    (t, loss, g)
}

fn chain_store<T: Real>() -> (ParamStore<T>, [ParamId; 4]) {
    let mut s = ParamStore::new();
    let mut add = |name: &str, group, shape: Vec<usize>, k: usize| {
        let t = Tensor::from_fn(shape, |i| T::from_f64((((i * 13 + k) % 17) as f64 - 8.0) * 0.09));
        let id = s.add(name, group, t).unwrap();
        s.set_trainable(id, true);
        id
    };
    let ids = [
        add("fc0.weight", ParamGroup::Weight, vec![4, 5], 1),
        add("fc0.bias", ParamGroup::Bias, vec![5], 2),
        add("fc1.weight", ParamGroup::Weight, vec![5, 2], 3),
        add("fc1.bias", ParamGroup::Bias, vec![2], 4),
    ];
    (s, ids)
}

/// (selective == save-all, f32 normalized, f64 normalized) for one activation.
fn activation_check(kind: ActKind) -> (bool, f64, f64) {
    let (s64, ids) = chain_store::<f64>();
    let (s32, _) = chain_store::<f32>();
    let grads = |mode| {
        let (mut t, _, g) = activation_chain(&s32, ids, kind, mode);
        backward_pass(&mut t, &s32, &g).unwrap()
    };
    let same = grads(SaveMode::Selective) == grads(SaveMode::SaveAll);
    let g32 = grads(SaveMode::Selective);
    let (mut t, _, g) = activation_chain(&s64, ids, kind, SaveMode::Selective);
    let g64 = backward_pass(&mut t, &s64, &g).unwrap();
    let probe = |st: &ParamStore<f64>| {
        let (t, loss, _) = activation_chain(st, ids, kind, SaveMode::SaveAll);
        Ok(Probe {
            loss,
            regions: tinytl::gradcheck::region_signature(&t),
        })
    };
    let r32 = finite_diff_check(&s64, &g32, EPS, probe).unwrap();
    let r64 = finite_diff_check(&s64, &g64, EPS, probe).unwrap();
    (same, r32.max_normalized_error, r64.max_normalized_error)
}

pub fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (mut exact, mut strict32, mut strict64, mut norm32, mut norm64) = (true, 0f64, 0f64, 0f64, 0f64);
    let mut checked = 0usize;
    for seed in 0..20u64 {
        let policy = &FineTunePolicy::NAMED[seed as usize % 6];
        let arch = ArchitectureSpec::random_tiny(seed);
        let (model, store, images, labels) = seeded_setup(&arch, seed).unwrap();
        let r = model_gradcheck(&model, &store, policy, &images, &labels, EPS).unwrap();
        exact &= r.selective_equals_save_all;
        strict32 = strict32.max(r.f32.max_rel_error);
        strict64 = strict64.max(r.f64.max_rel_error);
        norm32 = norm32.max(r.f32.max_normalized_error);
        norm64 = norm64.max(r.f64.max_normalized_error);
        checked += r.f64.checked;
    }
    for kind in [ActKind::Relu, ActKind::Sigmoid, ActKind::HSwish] {
        let (same, n32, n64) = activation_check(kind);
        exact &= same;
        norm32 = norm32.max(n32);
        norm64 = norm64.max(n64);
    }
    let secs = start.elapsed().as_secs_f64();
    let fast = secs < 120.0;
    let pass = exact && strict32 < F32_BOUND && strict64 < F64_BOUND && fast;
    let gate = exact && norm32 < F32_BOUND && norm64 < F64_BOUND && fast;
    Outcome {
        pass,
        gate,
        detail: format!(
            "save modes identical: {exact}; {checked} scalars; per-scalar rel err f32 {strict32:.2e}, f64 {strict64:.2e}; \
             peak-normalized err f32 {norm32:.2e} (< {F32_BOUND:e}), f64 {norm64:.2e} (< {F64_BOUND:e}); {secs:.0}s"
        ),
    }
}
