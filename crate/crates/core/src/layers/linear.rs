use crate::autograd::{OpKind, Saved, SaveMode, Tape, TrainMask, Var};
use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

use super::{missing_input, BackwardStep};

/// `out = a·W + b` with `a: N×D_in`, `W: D_in×D_out`, `b: D_out`.
///
/// The input is kept for backward only when `W` is trainable.
pub fn linear<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    a: &Var<T>,
    weight: ParamId,
    bias: Option<ParamId>,
) -> Result<Var<T>> {
    let (n, d_in) = a.value.dims2()?;
    let w = store.value(weight);
    let (w_in, d_out) = w.dims2()?;
    if w_in != d_in {
        return Err(shape_err!("linear input {:?} vs weight {:?}", a.shape(), w.shape()));
    }
    if let Some(b) = bias {
        if store.value(b).shape() != [d_out] {
            return Err(shape_err!("linear bias {:?} vs {} outputs", store.value(b).shape(), d_out));
        }
    }
    let mut out = vec![T::zero(); n * d_out];
    let wd = w.data();
    let ad = a.value.data();
    if let Some(b) = bias {
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(store.value(b).data());
        }
    }
    T::gemm(n, d_in, d_out, (ad, d_in as isize, 1), (wd, d_out as isize, 1), (&mut out, d_out as isize, 1));
    let out = Tensor::new(vec![n, d_out], out)?;
    out.ensure_finite("linear")?;

    let mask = TrainMask {
        weight_trainable: store.is_trainable(weight),
        bias_trainable: bias.is_some_and(|b| store.is_trainable(b)),
    };
    if !tape.needs_node(&[a], mask.weight_trainable || mask.bias_trainable) {
        return Ok(tape.detached(out));
    }
    let mut saved = Vec::new();
    if mask.weight_trainable || tape.mode() == SaveMode::SaveAll {
        saved.push(Saved::full(a.value.clone()));
    }
    let mut params = Vec::new();
    if mask.weight_trainable {
        params.push(weight);
    }
    if mask.bias_trainable {
        params.extend(bias);
    }
    Ok(tape.record(OpKind::Linear { weight, bias }, &[a], params, mask, saved, out))
}

pub(super) fn backward<T: Real>(
    store: &ParamStore<T>,
    weight: ParamId,
    bias: Option<ParamId>,
    input: Option<Tensor<T>>,
    grad: &Tensor<T>,
    needs_input: bool,
) -> Result<BackwardStep<T>> {
    let w = store.value(weight);
    let (d_in, d_out) = w.dims2()?;
    let (n, _) = grad.dims2()?;
    let g = grad.data();
    let mut params = Vec::new();

    if store.is_trainable(weight) {
        let a = input.ok_or_else(|| missing_input("linear"))?;
        let ad = a.data();
        let mut gw = vec![T::zero(); d_in * d_out];
        T::gemm(d_in, n, d_out, (ad, 1, d_in as isize), (g, d_out as isize, 1), (&mut gw, d_out as isize, 1));
        params.push((weight, Tensor::new(vec![d_in, d_out], gw)?));
    }
    if let Some(b) = bias.filter(|&b| store.is_trainable(b)) {
        let mut gb = vec![T::zero(); d_out];
        for r in 0..n {
            for (acc, &gv) in gb.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
                *acc += gv;
            }
        }
        params.push((b, Tensor::new(vec![d_out], gb)?));
    }
    let grad_in = if needs_input {
        let wd = w.data();
        let mut gi = vec![T::zero(); n * d_in];
        T::gemm(n, d_out, d_in, (g, d_out as isize, 1), (wd, 1, d_out as isize), (&mut gi, d_in as isize, 1));
        Some(Tensor::new(vec![n, d_in], gi)?)
    } else {
        None
    };
    Ok(BackwardStep {
        inputs: vec![grad_in],
        params,
    })
}
