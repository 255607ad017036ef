use serde::{Deserialize, Serialize};

use crate::autograd::{BitMask, OpKind, Saved, SavedBuf, SaveMode, Tape, TrainMask, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActKind {
    Relu,
    Sigmoid,
    HSwish,
}

#[inline]
fn relu6<T: Real>(x: T) -> T {
    x.max(T::zero()).min(T::from_f64(6.0))
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn forward_scalar<T: Real>(kind: ActKind, x: T) -> T {
    match kind {
        ActKind::Relu => x.max(T::zero()),
        ActKind::Sigmoid => sigmoid(x),
        ActKind::HSwish => x * relu6(x + T::from_f64(3.0)) / T::from_f64(6.0),
    }
}

#[inline]
fn derivative<T: Real>(kind: ActKind, x: T) -> T {
    match kind {
        ActKind::Relu => {
            if x >= T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        ActKind::Sigmoid => {
            let s = sigmoid(x);
            s * (T::one() - s)
        }
        ActKind::HSwish => {
            let three = T::from_f64(3.0);
            let six = T::from_f64(6.0);
            let inside = if x >= -three && x <= three { T::one() } else { T::zero() };
            relu6(x + three) / six + x * inside / six
        }
    }
}

/// Elementwise activation. ReLU keeps a one-bit mask of `x ≥ 0`; sigmoid and
/// h-swish keep their full 32-bit input.
pub fn activation<T: Real>(tape: &mut Tape<T>, x: &Var<T>, kind: ActKind) -> Result<Var<T>> {
    let out = x.value.map(|v| forward_scalar(kind, v));
    out.ensure_finite("activation")?;
    if !tape.needs_node(&[x], false) {
        return Ok(tape.detached(out));
    }
    let saved = match (kind, tape.mode()) {
        (ActKind::Relu, SaveMode::Selective) => {
            let d = x.value.data();
            Saved::mask(BitMask::from_fn(d.len(), |i| d[i] >= T::zero()))
        }
        _ => Saved::full(x.value.clone()),
    };
    Ok(tape.record(
        OpKind::Activation(kind),
        &[x],
        Vec::new(),
        TrainMask::default(),
        vec![saved],
        out,
    ))
}

pub(super) fn backward<T: Real>(kind: ActKind, saved: &SavedBuf<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let mut gi = grad.clone();
    match saved {
        SavedBuf::Mask(m) => {
            if kind != ActKind::Relu || m.len() != gi.numel() {
                return Err(Error::Structural("bit mask only backs a ReLU of equal size".into()));
            }
            for (i, g) in gi.data_mut().iter_mut().enumerate() {
                if !m.get(i) {
                    *g = T::zero();
                }
            }
        }
        SavedBuf::Full(x) => {
            for (g, &xv) in gi.data_mut().iter_mut().zip(x.data()) {
                *g *= derivative(kind, xv);
            }
        }
    }
    Ok(gi)
}
