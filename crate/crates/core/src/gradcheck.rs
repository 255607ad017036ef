//! Finite-difference verification of tape gradients.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward_pass, GradientSet, OpKind, SaveMode, SavedBuf, Tape};
use crate::blocks::{build_backbone, ArchitectureSpec, Exec, InitStrategy, Model};
use crate::error::{Error, Result};
use crate::layers::ActKind;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::train::{apply_policy, softmax_cross_entropy, FineTunePolicy};

/// One evaluation of the loss, with a fingerprint of which piece of every
/// piecewise activation each element fell in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub regions: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Scalars compared.
    pub checked: usize,
    /// Scalars skipped because a perturbation crossed a ReLU/h-swish kink.
    pub skipped_kinks: usize,
    /// Largest |fd − g| divided by the largest |g| over all checked scalars.
    pub max_normalized_error: f64,
}

/// Fingerprint of activation regions on a tape recorded in
/// [`SaveMode::SaveAll`](crate::autograd::SaveMode::SaveAll) mode.
pub fn region_signature<T: Real>(tape: &Tape<T>) -> u64 {
    let mut regions = Vec::new();
    for node in tape.nodes() {
        let OpKind::Activation(kind) = node.kind else {
            continue;
        };
        if kind == ActKind::Sigmoid {
            continue;
        }
        for s in &node.saved {
            match &s.buf {
                SavedBuf::Full(x) => regions.extend(x.data().iter().map(|&v| {
                    let v = v.as_f64();
                    match kind {
                        ActKind::Relu => (v >= 0.0) as u8,
                        _ => (v >= -3.0) as u8 + (v > 3.0) as u8,
                    }
                })),
                SavedBuf::Mask(m) => regions.extend((0..m.len()).map(|i| m.get(i) as u8)),
            }
        }
    }
    let mut h = DefaultHasher::new();
    regions.hash(&mut h);
    h.finish()
}

/// Compares `grads` with central differences of `probe` taken over every
/// trainable scalar of `store`.
///
/// Relative error uses the denominator `max(|g|, 1e-8)`.
/// Frozen parameters are not checked and must be absent from `grads`.
pub fn finite_diff_check<T: Real, U: Real>(
    store: &ParamStore<T>,
    grads: &GradientSet<U>,
    eps: f64,
    probe: impl FnMut(&ParamStore<T>) -> Result<Probe>,
) -> Result<GradCheckReport> {
    check_keys(store, grads)?;
    let mut probe = probe;
    let fd = central_differences(store, eps, |st, _| probe(st))?;
    compare(store, &fd, grads)
}

/// One refined difference quotient per trainable scalar; `None` where a
/// perturbation crossed a kink.
type Estimates = Vec<(ParamId, Vec<Option<f64>>)>;

fn check_keys<T: Real, U: Real>(store: &ParamStore<T>, grads: &GradientSet<U>) -> Result<()> {
    for id in grads.keys() {
        if !store.is_trainable(id) {
            return Err(Error::Contract(format!(
                "gradient reported for frozen parameter {}",
                store.param(id).name
            )));
        }
    }
    Ok(())
}

fn central_differences<T: Real>(
    store: &ParamStore<T>,
    eps: f64,
    mut probe: impl FnMut(&ParamStore<T>, Option<ParamId>) -> Result<Probe>,
) -> Result<Estimates> {
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let base = probe(store, None)?;
    finite(base.loss)?;
    let mut work = store.clone();
    let mut out = Vec::new();
    for id in store.trainable_ids() {
        let mut est = Vec::with_capacity(store.value(id).numel());
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            let mut eval = |delta: f64| -> Result<Probe> {
                work.value_mut(id).data_mut()[i] = orig + T::from_f64(delta);
                let p = probe(&work, Some(id));
                work.value_mut(id).data_mut()[i] = orig;
                let p = p?;
                finite(p.loss)?;
                Ok(p)
            };
            let (up, down) = (eval(eps)?, eval(-eps)?);
            if up.regions != base.regions || down.regions != base.regions {
                est.push(None);
                continue;
            }
            est.push(Some((up.loss - down.loss) / (2.0 * eps)));
        }
        out.push((id, est));
    }
    Ok(out)
}

fn compare<T: Real, U: Real>(store: &ParamStore<T>, fd: &Estimates, grads: &GradientSet<U>) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let mut peak = 0.0f64;
    let mut worst = 0.0f64;
    for (id, est) in fd {
        let g = grads
            .get(*id)
            .ok_or_else(|| Error::Contract(format!("no gradient for {}", store.param(*id).name)))?;
        for (e, gv) in est.iter().zip(g.data()) {
            let Some(fd) = e else {
                report.skipped_kinks += 1;
                continue;
            };
            let gv = gv.as_f64();
            let err = (fd - gv).abs();
            report.max_rel_error = report.max_rel_error.max(err / gv.abs().max(1e-8));
            worst = worst.max(err);
            peak = peak.max(gv.abs());
            report.checked += 1;
        }
    }
    report.max_normalized_error = if peak > 0.0 { worst / peak } else { worst };
    Ok(report)
}

/// Gradient checks of a whole model under one policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGradCheck {
    pub policy: String,
    pub trainable_scalars: usize,
    /// Selective-save gradients equal always-save ones bit for bit, in both precisions.
    pub selective_equals_save_all: bool,
    /// 32-bit tape gradients against 64-bit central differences.
    pub f32: GradCheckReport,
    pub f64: GradCheckReport,
}

fn model_grads<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    labels: &[usize],
    mode: SaveMode,
) -> Result<GradientSet<T>> {
    let mut tape = Tape::with_mode(mode);
    let logits = model.logits(&mut tape, store, images.clone())?;
    let (_, g) = softmax_cross_entropy(&logits.value, labels)?;
    backward_pass(&mut tape, store, &g)
}

/// Cross-entropy gradients of `model` on `images` under `policy`, checked
/// for save-mode equivalence and against finite differences.
pub fn model_gradcheck(
    model: &Model,
    store: &ParamStore<f32>,
    policy: &FineTunePolicy,
    images: &Tensor<f64>,
    labels: &[usize],
    eps: f64,
) -> Result<ModelGradCheck> {
    let mut s32 = store.clone();
    apply_policy(&mut s32, policy)?;
    let s64: ParamStore<f64> = s32.cast();
    let x32: Tensor<f32> = images.cast();
    let g32 = model_grads(model, &s32, &x32, labels, SaveMode::Selective)?;
    let g64 = model_grads(model, &s64, images, labels, SaveMode::Selective)?;
    let same = g32 == model_grads(model, &s32, &x32, labels, SaveMode::SaveAll)?
        && g64 == model_grads(model, &s64, images, labels, SaveMode::SaveAll)?;
    let mut replay = SegmentReplay::new(model, &s64, images, labels)?;
    let probe = |st: &ParamStore<f64>, moved: Option<ParamId>| -> Result<Probe> {
        let from = moved.map_or(Some(0), |id| model.segment_of(&st.param(id).name));
        replay.probe(st, from.unwrap_or(0))
    };
    let fd = central_differences(&s64, eps, probe)?;
    Ok(ModelGradCheck {
        policy: policy.to_string(),
        trainable_scalars: s32.trainable_count(),
        selective_equals_save_all: same,
        f32: compare(&s64, &fd, &g32)?,
        f64: compare(&s64, &fd, &g64)?,
    })
}

/// A seeded model of `arch` with live lite branches and unit-spread
/// logits, plus a batch of two random images and labels. Norm statistics
/// stay at their defaults: calibrating on a few tiny images leaves
/// near-constant channels whose amplification swamps the comparison.
pub fn seeded_setup(arch: &ArchitectureSpec, seed: u64) -> Result<(Model, ParamStore<f32>, Tensor<f64>, Vec<usize>)> {
    let (model, mut store) = build_backbone(arch, &InitStrategy::RandomZeroScale, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c0d);
    let r = arch.resolution;
    let calib = Tensor::<f32>::from_fn(vec![32, 3, r, r], |_| rng.gen_range(-1.0..1.0));
    let images = Tensor::from_fn(vec![2, 3, r, r], |_| rng.gen_range(-1.0..1.0));
    for id in store.ids().collect::<Vec<_>>() {
        let name = &store.param(id).name;
        let range = if name.ends_with("gamma") {
            0.5..1.5
        } else if name.ends_with("beta") || name.ends_with("bias") {
            -0.5..0.5
        } else {
            continue;
        };
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(range.clone());
        }
    }
    // unit-spread logits keep the softmax away from saturation
    let logits = model.predict(&store, calib)?;
    let n = logits.numel() as f64;
    let mean = logits.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (logits.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        for v in store.value_mut(model.head.weight).data_mut() {
            *v /= std as f32;
        }
    }
    let k = arch.head.n_classes;
    let labels = (0..2).map(|_| rng.gen_range(0..k)).collect();
    Ok((model, store, images, labels))
}

/// Loss evaluations that rerun only the segments downstream of a change,
/// starting from inputs cached on the unperturbed model.
struct SegmentReplay<'a> {
    model: &'a Model,
    labels: &'a [usize],
    inputs: Vec<Tensor<f64>>,
    regions: Vec<u64>,
}

impl<'a> SegmentReplay<'a> {
    fn new(model: &'a Model, store: &ParamStore<f64>, images: &Tensor<f64>, labels: &'a [usize]) -> Result<Self> {
        let mut r = SegmentReplay {
            model,
            labels,
            inputs: vec![images.clone()],
            regions: vec![],
        };
        let mut x = images.clone();
        for i in 0..model.segments() {
            let (out, sig) = r.segment(store, i, x)?;
            r.regions.push(sig);
            r.inputs.push(out.clone());
            x = out;
        }
        Ok(r)
    }

    fn segment(&self, store: &ParamStore<f64>, i: usize, x: Tensor<f64>) -> Result<(Tensor<f64>, u64)> {
        let mut tape = Tape::with_mode(SaveMode::SaveAll);
        // a tracked input keeps frozen activations on the tape, so their
        // regions are fingerprinted too
        let v = tape.leaf(x, true);
        let out = self.model.forward_segment(&mut Exec::new(&mut tape, store), i, &v)?;
        Ok((out.value, region_signature(&tape)))
    }

    fn probe(&mut self, store: &ParamStore<f64>, from: usize) -> Result<Probe> {
        let mut regions = self.regions[..from].to_vec();
        let mut x = self.inputs[from].clone();
        for i in from..self.model.segments() {
            let (out, sig) = self.segment(store, i, x)?;
            regions.push(sig);
            x = out;
        }
        let (loss, _) = softmax_cross_entropy(&x, self.labels)?;
        let mut h = DefaultHasher::new();
        regions.hash(&mut h);
        Ok(Probe {
            loss,
            regions: h.finish(),
        })
    }
}

fn finite(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite loss {loss}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{backward_pass, SaveMode};
    use crate::layers::linear;
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", ParamGroup::Weight, Tensor::full(vec![1], 3.0)).unwrap();
        s.set_trainable(w, true);
        let mut g = GradientSet::default();
        g.insert(w, Tensor::full(vec![1], 6.0));
        let r = finite_diff_check(&s, &g, 1e-4, |st| {
            let v = st.value(w).data()[0];
            Ok(Probe { loss: v * v, regions: 0 })
        })
        .unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    fn linear_loss(st: &ParamStore<f64>, w: crate::params::ParamId, b: crate::params::ParamId, mode: SaveMode) -> (Tape<f64>, f64) {
        let mut t = Tape::with_mode(mode);
        let x = t.input(Tensor::from_f64(vec![2, 3], &[0.5, -1., 2., 1.5, 0.25, -0.75]).unwrap());
        let y = linear(&mut t, st, &x, w, Some(b)).unwrap();
        let loss = y.value.data().iter().enumerate().map(|(i, v)| v * v * (i as f64 + 1.0)).sum();
        (t, loss)
    }

    #[test]
    fn linear_layer_and_frozen_exclusion() {
        for weight_trainable in [true, false] {
            let mut s = ParamStore::<f64>::new();
            let w = s
                .add("w", ParamGroup::Weight, Tensor::from_fn(vec![3, 2], |i| 0.3 * i as f64 - 0.7))
                .unwrap();
            let b = s.add("b", ParamGroup::Bias, Tensor::from_f64(vec![2], &[0.1, -0.2]).unwrap()).unwrap();
            s.set_trainable(w, weight_trainable);
            s.set_trainable(b, true);
            let (mut t, _) = linear_loss(&s, w, b, SaveMode::Selective);
            let out = t.nodes().last().unwrap().out_shape.clone();
            // recompute output for the loss gradient
            let (t2, _) = linear_loss(&s, w, b, SaveMode::SaveAll);
            drop(t2);
            let mut tape_y = Tape::inference();
            let x = tape_y.input(Tensor::from_f64(vec![2, 3], &[0.5, -1., 2., 1.5, 0.25, -0.75]).unwrap());
            let y = linear(&mut tape_y, &s, &x, w, Some(b)).unwrap();
            let lg = Tensor::from_fn(out, |i| 2.0 * y.value.data()[i] * (i as f64 + 1.0));
            let grads = backward_pass(&mut t, &s, &lg).unwrap();
            assert_eq!(grads.get(w).is_some(), weight_trainable);
            let r = finite_diff_check(&s, &grads, 1e-3, |st| {
                Ok(Probe {
                    loss: linear_loss(st, w, b, SaveMode::Selective).1,
                    regions: 0,
                })
            })
            .unwrap();
            assert_eq!(r.checked, if weight_trainable { 8 } else { 2 });
            assert!(r.max_rel_error < 1e-4);
        }
    }

    #[test]
    fn tiny_model_passes_under_every_policy() {
        let arch = ArchitectureSpec::random_tiny(3);
        let (m, s, x, y) = seeded_setup(&arch, 3).unwrap();
        for p in [FineTunePolicy::FtLast, FineTunePolicy::TinyTlB, FineTunePolicy::FtNormLast] {
            let c = model_gradcheck(&m, &s, &p, &x, &y, 1e-5).unwrap();
            assert!(c.selective_equals_save_all);
            assert_eq!(c.f32.checked + c.f32.skipped_kinks, c.trainable_scalars);
            assert!(c.f32.max_normalized_error < 1e-4, "{c:?}");
            assert!(c.f64.max_normalized_error < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let arch = ArchitectureSpec::random_tiny(1);
        let (m, mut s, x, y) = seeded_setup(&arch, 1).unwrap();
        apply_policy(&mut s, &FineTunePolicy::FtLast).unwrap();
        let mut g = model_grads(&m, &s, &x.cast(), &y, SaveMode::Selective).unwrap();
        let id = m.head.bias;
        let mut bad = g.get(id).unwrap().clone();
        bad.data_mut()[0] += 0.01;
        g.insert(id, bad);
        let s64: ParamStore<f64> = s.cast();
        let r = finite_diff_check(&s64, &g, 1e-5, |st| {
            let (loss, _) = softmax_cross_entropy(&m.predict(st, x.clone())?, &y)?;
            Ok(Probe { loss, regions: 0 })
        })
        .unwrap();
        assert!(r.max_normalized_error > 1e-3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = ParamStore::<f64>::new();
        let g = GradientSet::<f64>::default();
        assert!(finite_diff_check(&s, &g, 0.0, |_| Ok(Probe { loss: 0.0, regions: 0 })).is_err());
        let e = finite_diff_check(&s, &g, 1e-3, |_| Ok(Probe { loss: f64::NAN, regions: 0 })).unwrap_err();
        assert!(matches!(e, Error::Numeric(_)));
    }
}
