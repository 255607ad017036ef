use serde::{Deserialize, Serialize};

use crate::autograd::{OpKind, ParamSlice, Saved, SaveMode, Tape, TrainMask, Var};
use crate::error::{shape_err, spec_err, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

use super::{missing_input, slice_values, widen, BackwardStep};

pub const GN_CHANNELS_PER_GROUP: usize = 8;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-sample statistics over groups of channels.
    Group,
    /// Affine normalization with stored per-channel statistics.
    FrozenBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    pub channels_per_group: usize,
    pub eps: f64,
}

impl NormSpec {
    pub fn group() -> Self {
        NormSpec {
            kind: NormKind::Group,
            channels_per_group: GN_CHANNELS_PER_GROUP,
            eps: NORM_EPS,
        }
    }

    pub fn frozen_batch() -> Self {
        NormSpec {
            kind: NormKind::FrozenBatch,
            ..Self::group()
        }
    }

    pub fn check_channels(&self, channels: usize) -> Result<()> {
        if self.kind == NormKind::Group && (self.channels_per_group == 0 || channels % self.channels_per_group != 0) {
            return Err(spec_err!(
                "group norm over {} channels needs a multiple of {}",
                channels,
                self.channels_per_group
            ));
        }
        Ok(())
    }
}

fn all_zero<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_zero())
}

/// Output `β` broadcast over `shape`: a frozen all-zero scale makes the
/// layer constant in its input.
fn constant_beta<T: Real>(beta: &[T], n: usize, c: usize, plane: usize) -> Result<Tensor<T>> {
    let mut out = Vec::with_capacity(n * c * plane);
    for _ in 0..n {
        for &b in beta {
            out.extend(std::iter::repeat(b).take(plane));
        }
    }
    Tensor::new(vec![n, c, plane], out)
}

/// Group normalization with per-channel affine.
///
/// Statistics are computed per sample, so a sample's output does not depend
/// on the rest of the batch. The input is saved when `γ` is trainable, and
/// also whenever a gradient must pass through to the input: the group
/// statistics depend on the input, so the input gradient needs it too.
pub fn group_norm<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: &Var<T>,
    gamma: ParamSlice,
    beta: ParamSlice,
    group_size: usize,
    eps: f64,
) -> Result<Var<T>> {
    let (n, c, h, w) = x.value.dims4()?;
    NormSpec {
        kind: NormKind::Group,
        channels_per_group: group_size,
        eps,
    }
    .check_channels(c)?;
    let g = slice_values(store, gamma)?;
    let b = slice_values(store, beta)?;
    if g.len() != c || b.len() != c {
        return Err(shape_err!("norm affine of {} for {} channels", g.len(), c));
    }
    let mask = TrainMask {
        weight_trainable: store.is_trainable(gamma.id),
        bias_trainable: store.is_trainable(beta.id),
    };
    let plane = h * w;
    if !mask.weight_trainable && all_zero(g) {
        let out = constant_beta(b, n, c, plane)?.reshape(vec![n, c, h, w])?;
        return Ok(constant_output(tape, out, beta, mask));
    }
    let groups = c / group_size;
    let span = group_size * plane;
    let mut out = x.value.data().to_vec();
    for bn in 0..n {
        for gi in 0..groups {
            let chunk = &mut out[(bn * c + gi * group_size) * plane..][..span];
            let (mean, inv) = group_moments(chunk, eps);
            for (cl, ch) in chunk.chunks_mut(plane).enumerate() {
                let ci = gi * group_size + cl;
                for v in ch.iter_mut() {
                    *v = g[ci] * ((*v - mean) * inv) + b[ci];
                }
            }
        }
    }
    let out = Tensor::new(vec![n, c, h, w], out)?;
    out.ensure_finite("group_norm")?;
    if !tape.needs_node(&[x], mask.weight_trainable || mask.bias_trainable) {
        return Ok(tape.detached(out));
    }
    let mut saved = Vec::new();
    if mask.weight_trainable || x.requires_grad || tape.mode() == SaveMode::SaveAll {
        saved.push(Saved::full(x.value.clone()));
    }
    let params = trainable_affine(gamma, beta, mask);
    let kind = OpKind::GroupNorm {
        gamma,
        beta,
        group_size,
        eps,
    };
    Ok(tape.record(kind, &[x], params, mask, saved, out))
}

fn constant_output<T: Real>(tape: &mut Tape<T>, out: Tensor<T>, beta: ParamSlice, mask: TrainMask) -> Var<T> {
    if tape.is_recording() && mask.bias_trainable {
        // Only β receives a gradient; the input gets exactly zero, so the
        // node is recorded without an input edge.
        let kind = OpKind::FrozenNorm {
            gamma: ParamSlice { id: beta.id, len: 0 },
            beta,
            mean: ParamSlice { id: beta.id, len: 0 },
            var: ParamSlice { id: beta.id, len: 0 },
            eps: 0.0,
        };
        tape.record(kind, &[], vec![beta.id], mask, Vec::new(), out)
    } else {
        tape.detached(out)
    }
}

fn trainable_affine(gamma: ParamSlice, beta: ParamSlice, mask: TrainMask) -> Vec<crate::params::ParamId> {
    let mut p = Vec::new();
    if mask.weight_trainable {
        p.push(gamma.id);
    }
    if mask.bias_trainable {
        p.push(beta.id);
    }
    p
}

fn group_moments<T: Real>(xs: &[T], eps: f64) -> (T, T) {
    let nf = T::from_f64(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / nf;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
    (mean, T::one() / (var + T::from_f64(eps)).sqrt())
}

#[allow(clippy::too_many_arguments)]
pub(super) fn group_norm_backward<T: Real>(
    store: &ParamStore<T>,
    gamma: ParamSlice,
    beta: ParamSlice,
    group_size: usize,
    eps: f64,
    input: Option<Tensor<T>>,
    grad: &Tensor<T>,
    needs_input: bool,
) -> Result<BackwardStep<T>> {
    let (n, c, h, w) = grad.dims4()?;
    let plane = h * w;
    let g_aff = slice_values(store, gamma)?;
    let gamma_tr = store.is_trainable(gamma.id);
    let beta_tr = store.is_trainable(beta.id);
    let gd = grad.data();
    let mut params = Vec::new();
    if beta_tr {
        let mut gb = vec![T::zero(); c];
        for bn in 0..n {
            for (ci, acc) in gb.iter_mut().enumerate() {
                *acc += gd[(bn * c + ci) * plane..][..plane].iter().copied().sum::<T>();
            }
        }
        params.push((beta.id, widen(store, beta, gb)));
    }
    if !gamma_tr && !needs_input {
        return Ok(BackwardStep {
            inputs: vec![None],
            params,
        });
    }
    let x = input.ok_or_else(|| missing_input("group_norm"))?;
    let xd = x.data();
    let groups = c / group_size;
    let span = group_size * plane;
    let mut gg = vec![T::zero(); c];
    let mut gi = if needs_input { vec![T::zero(); xd.len()] } else { Vec::new() };
    let spanf = T::from_f64(span as f64);
    for bn in 0..n {
        for grp in 0..groups {
            let base = (bn * c + grp * group_size) * plane;
            let xs = &xd[base..base + span];
            let gs = &gd[base..base + span];
            let (mean, inv) = group_moments(xs, eps);
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for (i, (&xv, &gv)) in xs.iter().zip(gs).enumerate() {
                let ci = grp * group_size + i / plane;
                let xhat = (xv - mean) * inv;
                gg[ci] += gv * xhat;
                let d = gv * g_aff[ci];
                sum_d += d;
                sum_dx += d * xhat;
            }
            if needs_input {
                let md = sum_d / spanf;
                let mdx = sum_dx / spanf;
                for (i, (&xv, &gv)) in xs.iter().zip(gs).enumerate() {
                    let ci = grp * group_size + i / plane;
                    let xhat = (xv - mean) * inv;
                    gi[base + i] = inv * (gv * g_aff[ci] - md - xhat * mdx);
                }
            }
        }
    }
    if gamma_tr {
        params.insert(0, (gamma.id, widen(store, gamma, gg)));
    }
    let gi = if needs_input {
        Some(Tensor::new(vec![n, c, h, w], gi)?)
    } else {
        None
    };
    Ok(BackwardStep { inputs: vec![gi], params })
}

/// `y = γ·(x − μ)/√(σ² + eps) + β` with stored `μ`, `σ²`.
///
/// Linear in its input, so it keeps a copy of the input only when `γ` is
/// trainable.
#[allow(clippy::too_many_arguments)]
pub fn frozen_norm<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: &Var<T>,
    gamma: ParamSlice,
    beta: ParamSlice,
    mean: ParamSlice,
    var: ParamSlice,
    eps: f64,
) -> Result<Var<T>> {
    let (n, c, h, w) = x.value.dims4()?;
    let g = slice_values(store, gamma)?;
    let b = slice_values(store, beta)?;
    let m = slice_values(store, mean)?;
    let v = slice_values(store, var)?;
    if [g.len(), b.len(), m.len(), v.len()].iter().any(|&l| l != c) {
        return Err(shape_err!("frozen norm parameters do not cover {} channels", c));
    }
    let mask = TrainMask {
        weight_trainable: store.is_trainable(gamma.id),
        bias_trainable: store.is_trainable(beta.id),
    };
    let plane = h * w;
    if !mask.weight_trainable && all_zero(g) {
        let out = constant_beta(b, n, c, plane)?.reshape(vec![n, c, h, w])?;
        return Ok(constant_output(tape, out, beta, mask));
    }
    let mut out = x.value.data().to_vec();
    for bn in 0..n {
        for ci in 0..c {
            let inv = T::one() / (v[ci] + T::from_f64(eps)).sqrt();
            for val in out[(bn * c + ci) * plane..][..plane].iter_mut() {
                *val = g[ci] * ((*val - m[ci]) * inv) + b[ci];
            }
        }
    }
    let out = Tensor::new(vec![n, c, h, w], out)?;
    out.ensure_finite("frozen_norm")?;
    if !tape.needs_node(&[x], mask.weight_trainable || mask.bias_trainable) {
        return Ok(tape.detached(out));
    }
    let mut saved = Vec::new();
    if mask.weight_trainable || tape.mode() == SaveMode::SaveAll {
        saved.push(Saved::full(x.value.clone()));
    }
    let params = trainable_affine(gamma, beta, mask);
    let kind = OpKind::FrozenNorm {
        gamma,
        beta,
        mean,
        var,
        eps,
    };
    Ok(tape.record(kind, &[x], params, mask, saved, out))
}

pub(super) fn frozen_norm_backward<T: Real>(
    store: &ParamStore<T>,
    [gamma, beta, mean, var]: [ParamSlice; 4],
    eps: f64,
    input: Option<Tensor<T>>,
    grad: &Tensor<T>,
    needs_input: bool,
) -> Result<BackwardStep<T>> {
    let (n, c, h, w) = grad.dims4()?;
    let plane = h * w;
    let gd = grad.data();
    let mut params = Vec::new();
    if store.is_trainable(beta.id) {
        let mut gb = vec![T::zero(); c];
        for bn in 0..n {
            for (ci, acc) in gb.iter_mut().enumerate() {
                *acc += gd[(bn * c + ci) * plane..][..plane].iter().copied().sum::<T>();
            }
        }
        params.push((beta.id, widen(store, beta, gb)));
    }
    if gamma.len == 0 {
        // constant-output node: β only
        return Ok(BackwardStep { inputs: vec![], params });
    }
    let g = slice_values(store, gamma)?;
    let m = slice_values(store, mean)?;
    let v = slice_values(store, var)?;
    let inv: Vec<T> = v.iter().map(|&vv| T::one() / (vv + T::from_f64(eps)).sqrt()).collect();
    if store.is_trainable(gamma.id) {
        let x = input.ok_or_else(|| missing_input("frozen_norm"))?;
        let xd = x.data();
        let mut gg = vec![T::zero(); c];
        for bn in 0..n {
            for ci in 0..c {
                let off = (bn * c + ci) * plane;
                gg[ci] += xd[off..off + plane]
                    .iter()
                    .zip(&gd[off..off + plane])
                    .map(|(&xv, &gv)| gv * (xv - m[ci]) * inv[ci])
                    .sum::<T>();
            }
        }
        params.insert(0, (gamma.id, widen(store, gamma, gg)));
    }
    let gi = if needs_input {
        let mut gi = gd.to_vec();
        for bn in 0..n {
            for ci in 0..c {
                let s = g[ci] * inv[ci];
                for val in gi[(bn * c + ci) * plane..][..plane].iter_mut() {
                    *val *= s;
                }
            }
        }
        Some(Tensor::new(vec![n, c, h, w], gi)?)
    } else {
        None
    };
    Ok(BackwardStep { inputs: vec![gi], params })
}

impl From<NormKind> for NormSpec {
    fn from(kind: NormKind) -> Self {
        match kind {
            NormKind::Group => NormSpec::group(),
            NormKind::FrozenBatch => NormSpec::frozen_batch(),
        }
    }
}
