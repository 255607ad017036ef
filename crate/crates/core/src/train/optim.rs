use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::autograd::GradientSet;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `0.5·lr0·(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * lr0 * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug, Default)]
pub struct AdamState<T: Real = f32> {
    pub m: BTreeMap<ParamId, Tensor<T>>,
    pub v: BTreeMap<ParamId, Tensor<T>>,
    pub step: u64,
}

/// One bias-corrected Adam update of every trainable parameter. `grads`
/// must cover exactly the trainable set.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, grads: &GradientSet<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if let Some(id) = store.trainable_ids().into_iter().find(|&id| grads.get(id).is_none()) {
        return Err(Error::Contract(format!("no gradient for trainable {}", store.param(id).name)));
    }
    adam_step_sparse(store, grads, state, lr)
}

/// Like [`adam_step`], but trainable parameters without a gradient are left
/// untouched, moments included. Used when each step trains a different
/// sub-network of shared weights.
pub fn adam_step_sparse<T: Real>(store: &mut ParamStore<T>, grads: &GradientSet<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    for (id, g) in grads.iter() {
        if !store.is_trainable(id) {
            return Err(Error::Contract(format!("gradient for frozen {}", store.param(id).name)));
        }
        if g.shape() != store.value(id).shape() {
            return Err(Error::Contract(format!("gradient shape mismatch for {}", store.param(id).name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
    for (id, g) in grads.iter() {
        let shape = g.shape().to_vec();
        let m = state.m.entry(id).or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state.v.entry(id).or_insert_with(|| Tensor::zeros(shape));
        let p = store.value_mut(id).data_mut();
        for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = mi.as_f64() / c1;
            let vhat = vi.as_f64() / c2;
            *pi -= T::from_f64(lr * mhat / (vhat.sqrt() + ADAM_EPS));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
    }

    fn store() -> (ParamStore<f64>, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let a = s.add("a", ParamGroup::Bias, Tensor::full(vec![3], 1.0)).unwrap();
        let b = s.add("b", ParamGroup::Weight, Tensor::full(vec![2], 5.0)).unwrap();
        s.set_trainable(a, true);
        (s, a, b)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, a, b) = store();
        let mut g = GradientSet::default();
        g.insert(a, Tensor::from_f64(vec![3], &[0.5, -2.0, 0.0]).unwrap());
        let mut st = AdamState::default();
        adam_step(&mut s, &g, &mut st, 0.01).unwrap();
        let p = s.value(a).data();
        assert!((p[0] - 0.99).abs() < 1e-7 && (p[1] - 1.01).abs() < 1e-7 && p[2] == 1.0);
        assert_eq!(s.value(b).data(), &[5.0, 5.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let (mut s, a, _) = store();
        let mut g = GradientSet::default();
        g.insert(a, Tensor::zeros(vec![3]));
        let mut st = AdamState::default();
        for _ in 0..3 {
            adam_step(&mut s, &g, &mut st, 0.1).unwrap();
        }
        assert_eq!(s.value(a).data(), &[1.0; 3]);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn gradient_set_must_match_trainable_set() {
        let (mut s, a, b) = store();
        let mut st = AdamState::default();
        let e = adam_step(&mut s, &GradientSet::default(), &mut st, 0.1).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
        let mut g = GradientSet::default();
        g.insert(a, Tensor::zeros(vec![3]));
        g.insert(b, Tensor::zeros(vec![2]));
        assert!(adam_step(&mut s, &g, &mut st, 0.1).is_err());
    }

    #[test]
    fn sparse_step_skips_missing() {
        let (mut s, a, b) = store();
        s.set_trainable(b, true);
        let mut g = GradientSet::default();
        g.insert(a, Tensor::full(vec![3], 1.0));
        let mut st = AdamState::default();
        assert!(adam_step(&mut s, &g, &mut st, 0.1).is_err());
        adam_step_sparse(&mut s, &g, &mut st, 0.1).unwrap();
        assert_eq!(s.value(b).data(), &[5.0, 5.0]);
        assert!((s.value(a).data()[0] - 0.9).abs() < 1e-9);
        assert!(!st.m.contains_key(&b));
    }
}
