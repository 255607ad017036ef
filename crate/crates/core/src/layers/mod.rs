//! Layer primitives. Every forward op records onto a [`Tape`] using the
//! storage rule of its kind; the matching backward kernels live beside them.
//!
//! [`Tape`]: crate::autograd::Tape

mod activation;
mod conv;
mod linear;
mod norm;
mod resize;

pub use activation::{activation, ActKind};
pub use conv::{conv2d, weight_standardize, ConvGeometry, ConvSpec, WeightView};
pub use linear::linear;
pub use norm::{frozen_norm, group_norm, NormKind, NormSpec, GN_CHANNELS_PER_GROUP, NORM_EPS};
pub use resize::{add, avg_pool2, bilinear_upsample, global_avg_pool, pooled_dim};

use crate::autograd::{OpKind, ParamSlice, Saved, SavedBuf, TapeNode};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Gradients produced by one node: one slot per input, plus trainable
/// parameter gradients.
pub(crate) struct BackwardStep<T> {
    pub inputs: Vec<Option<Tensor<T>>>,
    pub params: Vec<(ParamId, Tensor<T>)>,
}

pub(crate) fn backward_node<T: Real>(
    node: &TapeNode<T>,
    saved: Vec<Saved<T>>,
    grad: &Tensor<T>,
    store: &ParamStore<T>,
) -> Result<BackwardStep<T>> {
    let needs_input = node.input_requires_grad.first().copied().unwrap_or(false);
    match &node.kind {
        OpKind::Linear { weight, bias } => {
            linear::backward(store, *weight, *bias, take_full(saved), grad, needs_input)
        }
        OpKind::Conv {
            geom,
            weight,
            bias,
            standardize,
        } => conv::backward(store, geom, weight, *bias, *standardize, take_full(saved), grad, needs_input),
        OpKind::GroupNorm {
            gamma,
            beta,
            group_size,
            eps,
        } => norm::group_norm_backward(store, *gamma, *beta, *group_size, *eps, take_full(saved), grad, needs_input),
        OpKind::FrozenNorm {
            gamma,
            beta,
            mean,
            var,
            eps,
        } => norm::frozen_norm_backward(store, [*gamma, *beta, *mean, *var], *eps, take_full(saved), grad, needs_input),
        OpKind::Activation(kind) => {
            let buf = saved
                .into_iter()
                .next()
                .map(|s| s.buf)
                .ok_or_else(|| Error::Structural("activation node saved nothing".into()))?;
            Ok(BackwardStep {
                inputs: vec![Some(activation::backward(*kind, &buf, grad)?)],
                params: vec![],
            })
        }
        OpKind::AvgPool2 { in_shape } => Ok(BackwardStep {
            inputs: vec![Some(resize::avg_pool2_backward(*in_shape, grad)?)],
            params: vec![],
        }),
        OpKind::Upsample { in_shape } => Ok(BackwardStep {
            inputs: vec![Some(resize::upsample_backward(*in_shape, grad)?)],
            params: vec![],
        }),
        OpKind::GlobalAvgPool { in_shape } => Ok(BackwardStep {
            inputs: vec![Some(resize::global_avg_pool_backward(*in_shape, grad)?)],
            params: vec![],
        }),
        OpKind::Add => Ok(BackwardStep {
            inputs: node.input_requires_grad.iter().map(|_| Some(grad.clone())).collect(),
            params: vec![],
        }),
    }
}

fn take_full<T: Real>(saved: Vec<Saved<T>>) -> Option<Tensor<T>> {
    saved.into_iter().find_map(|s| match s.buf {
        SavedBuf::Full(t) => Some(t),
        SavedBuf::Mask(_) => None,
    })
}

/// Leading `len` entries of a per-channel parameter.
pub(crate) fn slice_values<T: Real>(store: &ParamStore<T>, s: ParamSlice) -> Result<&[T]> {
    let v = store.value(s.id).data();
    if s.len > v.len() {
        return Err(Error::Spec(format!(
            "slice of {} channels from parameter {} with {}",
            s.len,
            store.param(s.id).name,
            v.len()
        )));
    }
    Ok(&v[..s.len])
}

/// Writes a gradient for the leading `len` channels into a full-size tensor.
pub(crate) fn widen<T: Real>(store: &ParamStore<T>, s: ParamSlice, g: Vec<T>) -> Tensor<T> {
    let full = store.value(s.id);
    let mut out = Tensor::zeros(full.shape().to_vec());
    out.data_mut()[..g.len()].copy_from_slice(&g);
    out
}

pub(crate) fn missing_input(op: &str) -> Error {
    Error::Structural(format!(
        "{op}: weight gradient requested but the input activation was not saved"
    ))
}
