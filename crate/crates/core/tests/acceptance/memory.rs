use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tinytl::autograd::{OpKind, Tape};
use tinytl::blocks::{build_backbone, build_block, calibrate_norms, ArchitectureSpec, InitStrategy, LiteResidualSpec, MbBlockSpec, Model};
use tinytl::io::{synth_dataset, SynthSpec};
use tinytl::layers::{activation, ActKind};
use tinytl::memory::{analyze, lite_overhead_ratio};
use tinytl::params::ParamStore;
use tinytl::tensor::Tensor;
use tinytl::train::{apply_policy, train, FineTunePolicy, TrainConfig};

use crate::Outcome;

/// Analytic ratio FT-Full / TinyTL-L+B of the headline footprint of the
/// reference network at batch 8, 224 pixels.
pub const GOLDEN_HEADLINE_RATIO: f64 = 16.603845973260;

fn reference() -> (Model, ParamStore<f32>) {
    build_backbone(&ArchitectureSpec::reference_tiny(), &InitStrategy::RandomZeroScale, 0).unwrap()
}

/// Nonzero last lite scales, so every branch runs whatever the policy.
fn live_lite(store: &mut ParamStore<f32>) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.param(id).name.contains(".lite.") && store.param(id).name.ends_with("conv2.norm.gamma") {
            store.value_mut(id).data_mut().fill(0.5);
        }
    }
}

fn random_images(n: usize, res: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![n, 3, res, res], |_| rng.gen_range(-1.0..1.0))
}

pub fn criterion_2() -> Outcome {
    let (model, base) = reference();
    let mut bad = Vec::new();
    let (mut frozen_nodes, mut relu_nodes, mut gn_through) = (0usize, 0usize, 0usize);
    for policy in &FineTunePolicy::NAMED {
        let mut store = base.clone();
        live_lite(&mut store);
        apply_policy(&mut store, policy).unwrap();
        let mut tape = Tape::new();
        model.logits(&mut tape, &store, random_images(2, 32, 1)).unwrap();
        for node in tape.nodes() {
            let numel: usize = node.out_shape.iter().product();
            let needs_input_grad = node.input_requires_grad.iter().any(|&r| r);
            match &node.kind {
                // batch-statistics standardization is nonlinear: a gradient
                // passing through it needs the normalized input even with γ frozen
                OpKind::GroupNorm { .. } if !node.mask.weight_trainable && needs_input_grad => {
                    gn_through += 1;
                    if node.full32_bytes() != 4 * numel as u64 {
                        bad.push(format!("{policy}: group_norm on a gradient path saves {}", node.full32_bytes()));
                    }
                }
                k if k.is_weighted() && !node.mask.weight_trainable => {
                    frozen_nodes += 1;
                    if node.full32_bytes() != 0 {
                        bad.push(format!("{policy}: frozen {} saves {} bytes", k.name(), node.full32_bytes()));
                    }
                }
                OpKind::Activation(ActKind::Relu) => {
                    relu_nodes += 1;
                    let want = if needs_input_grad { numel.div_ceil(8) as u64 } else { 0 };
                    if node.saved_bytes() != want {
                        bad.push(format!("{policy}: relu saves {} not {want}", node.saved_bytes()));
                    }
                }
                _ => {}
            }
        }
    }
    let mut smooth = 0usize;
    for kind in [ActKind::Sigmoid, ActKind::HSwish] {
        for shape in [vec![1, 3, 5, 5], vec![2, 7], vec![4, 8, 3, 3]] {
            let numel: usize = shape.iter().product();
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::from_fn(shape, |i| (i as f32 * 0.37).sin() * 4.0), true);
            activation(&mut tape, &x, kind).unwrap();
            let saved = tape.nodes()[0].full32_bytes();
            smooth += 1;
            if saved != 4 * numel as u64 || tape.nodes()[0].saved_bytes() != saved {
                bad.push(format!("{kind:?} on {numel} elements saves {saved}"));
            }
        }
    }
    Outcome::new(
        bad.is_empty(),
        format!(
            "{frozen_nodes} frozen-weight nodes save 0, {relu_nodes} relu nodes save ceil(n/8), {smooth} sigmoid/h-swish nodes save 4n; \
             {gn_through} frozen group norms on a gradient path save 4n; mismatches: {:?}",
            bad.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

pub fn criterion_3() -> Outcome {
    let spec = MbBlockSpec {
        in_ch: 32,
        out_ch: 32,
        expand: 6,
        kernel: 3,
        stride: 1,
        lite: LiteResidualSpec::default(),
    };
    let (block, store) = build_block(&spec, 0).unwrap();
    let r = lite_overhead_ratio(&block, &store, 8, 56, 56).unwrap();
    Outcome::new(
        (21.0..=31.0).contains(&r.ratio) && r.channel_factor == 6.5,
        format!(
            "ratio {:.2} in [21, 31]; channel factor {} (want exactly 6.5); spatial factor {}",
            r.ratio, r.channel_factor, r.resolution_factor
        ),
    )
}

pub fn criterion_4() -> Outcome {
    let (model, base) = reference();
    let mut mismatches = Vec::new();
    let mut combos = 0;
    for res in [128, 224] {
        let data = synth_dataset(&SynthSpec::new(4, 2, res, 3)).unwrap();
        for batch in [1, 8] {
            let data = data.subset(&(0..batch).collect::<Vec<_>>()).unwrap();
            for policy in &FineTunePolicy::NAMED {
                let mut store = base.clone();
                let report = train(&model, &mut store, &data, policy, &TrainConfig::new(1, batch, 1e-3, 0)).unwrap();
                let mut fresh = base.clone();
                apply_policy(&mut fresh, policy).unwrap();
                let analytic = analyze(&model, &fresh, batch, res).unwrap().memory.totals.saved_activation_bytes;
                combos += 1;
                if analytic != report.peak_saved_bytes {
                    mismatches.push(format!("{policy}/b{batch}/r{res}: {analytic} vs {}", report.peak_saved_bytes));
                }
            }
        }
    }
    Outcome::new(
        mismatches.is_empty(),
        format!("{combos} (policy, batch, resolution) runs, analytic == runtime peak; mismatches: {mismatches:?}"),
    )
}

pub fn headline_ratio() -> f64 {
    let (model, base) = reference();
    let mb = |p: &FineTunePolicy| {
        let mut s = base.clone();
        apply_policy(&mut s, p).unwrap();
        analyze(&model, &s, 8, 224).unwrap().memory.totals.headline_mb
    };
    mb(&FineTunePolicy::FtFull) / mb(&FineTunePolicy::TinyTlLB)
}

pub fn criterion_5() -> Outcome {
    let r = headline_ratio();
    let golden = (r - GOLDEN_HEADLINE_RATIO).abs() <= 1e-9 * GOLDEN_HEADLINE_RATIO;
    Outcome::new(
        r >= 4.5 && golden,
        format!("FT-Full / TinyTL-L+B headline = {r:.12} (>= 4.5; golden {GOLDEN_HEADLINE_RATIO:.6}, matches: {golden})"),
    )
}

pub fn criterion_6() -> Outcome {
    let (model, mut base) = reference();
    live_lite(&mut base);
    let mut parts = Vec::new();
    let mut ok = true;
    // every conv weight frozen while the backward pass still crosses the backbone
    let frozen_weight = [FineTunePolicy::FtNormLast, FineTunePolicy::TinyTlB];
    for policy in &FineTunePolicy::NAMED {
        let mut s = base.clone();
        apply_policy(&mut s, policy).unwrap();
        let c = analyze(&model, &s, 8, 224).unwrap();
        let r = c.training_mac as f64 / c.inference_mac as f64;
        let bound = if *policy == FineTunePolicy::FtFull {
            Some(2.7..=3.0)
        } else if frozen_weight.contains(policy) {
            Some(1.9..=2.1)
        } else {
            None
        };
        match bound {
            Some(b) => {
                ok &= b.contains(&r);
                parts.push(format!("{policy} {r:.3} in [{}, {}]", b.start(), b.end()));
            }
            None => parts.push(format!("{policy} {r:.3}")),
        }
    }
    Outcome::new(ok, format!("training/inference MACs: {}", parts.join(", ")))
}

pub fn criterion_7() -> Outcome {
    let arch = ArchitectureSpec::reference_tiny();
    let (model, mut store) = build_backbone(&arch, &InitStrategy::RandomZeroScale, 7).unwrap();
    calibrate_norms(&model, &mut store, &random_images(32, 32, 70)).unwrap();
    // trainable last scales force every branch to be evaluated and added
    apply_policy(&mut store, &FineTunePolicy::TinyTlLB).unwrap();
    let plain = model.without_lite();
    let mut identical = 0;
    for chunk in 0..10u64 {
        let x = random_images(10, 32, 100 + chunk);
        let a = model.predict(&store, x.clone()).unwrap();
        let b = plain.predict(&store, x).unwrap();
        identical += a
            .data()
            .chunks(arch.head.n_classes)
            .zip(b.data().chunks(arch.head.n_classes))
            .filter(|(p, q)| p.iter().zip(q.iter()).all(|(u, v)| u.to_bits() == v.to_bits()))
            .count();
    }
    Outcome::new(identical == 100, format!("{identical}/100 inputs with bit-identical logits"))
}
