use serde::{Deserialize, Serialize};

use crate::autograd::{OpKind, ParamSlice, Saved, SaveMode, Tape, TrainMask, Var};
use crate::error::{shape_err, spec_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

use super::{missing_input, slice_values, widen, BackwardStep};

/// Convolution hyper-parameters; padding is `kernel / 2` ("same" style).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, groups: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride,
            groups,
            has_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(spec_err!("kernel {} must be odd", self.kernel));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(spec_err!("stride {} must be 1 or 2", self.stride));
        }
        if self.groups == 0 || self.in_ch % self.groups != 0 || self.out_ch % self.groups != 0 {
            return Err(spec_err!(
                "channels {}→{} not divisible by {} groups",
                self.in_ch,
                self.out_ch,
                self.groups
            ));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    /// Output side length for an input side length.
    pub fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.padding() - self.kernel) / self.stride + 1
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_per_group(), self.kernel, self.kernel]
    }
}

/// Spatial bookkeeping of one recorded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub spec: ConvSpec,
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// How an effective `out × in/groups × k × k` kernel is read out of a
/// (possibly larger) stored weight.
///
/// Output channels are the leading ones, smaller kernels are the centred
/// sub-kernel, and each effective input channel is located inside the stored
/// group that owns the output channel. A dense view is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightView {
    pub id: ParamId,
    pub full_out: usize,
    pub full_in: usize,
    pub full_groups: usize,
    pub full_kernel: usize,
}

impl WeightView {
    pub fn dense(id: ParamId, spec: &ConvSpec) -> Self {
        WeightView {
            id,
            full_out: spec.out_ch,
            full_in: spec.in_ch,
            full_groups: spec.groups,
            full_kernel: spec.kernel,
        }
    }

    pub fn full_shape(&self) -> [usize; 4] {
        [
            self.full_out,
            self.full_in / self.full_groups,
            self.full_kernel,
            self.full_kernel,
        ]
    }

    /// Checks that `spec` can be cut out of the stored weight.
    pub fn check(&self, spec: &ConvSpec) -> Result<()> {
        spec.validate()?;
        if spec.out_ch > self.full_out || spec.in_ch > self.full_in || spec.kernel > self.full_kernel {
            return Err(spec_err!(
                "conv {}→{} k{} does not fit stored {}→{} k{}",
                spec.in_ch,
                spec.out_ch,
                spec.kernel,
                self.full_in,
                self.full_out,
                self.full_kernel
            ));
        }
        let fipg = self.full_in / self.full_groups;
        let fopg = self.full_out / self.full_groups;
        for o in 0..spec.out_ch {
            let first = (o / spec.out_per_group()) * spec.in_per_group();
            let base = (o / fopg) * fipg;
            if first < base || first + spec.in_per_group() > base + fipg {
                return Err(spec_err!(
                    "groups={} view of a groups={} weight splits a stored group",
                    spec.groups,
                    self.full_groups
                ));
            }
        }
        Ok(())
    }

    #[inline]
    fn offsets(&self, spec: &ConvSpec, o: usize) -> (usize, usize) {
        let fipg = self.full_in / self.full_groups;
        let fopg = self.full_out / self.full_groups;
        let first = (o / spec.out_per_group()) * spec.in_per_group();
        let in_off = first - (o / fopg) * fipg;
        (in_off, (self.full_kernel - spec.kernel) / 2)
    }

    pub fn gather<T: Real>(&self, full: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
        if full.shape() != self.full_shape() {
            return Err(shape_err!("stored weight {:?} vs view {:?}", full.shape(), self.full_shape()));
        }
        self.check(spec)?;
        let [_, fipg, fk, _] = self.full_shape();
        let (ipg, k) = (spec.in_per_group(), spec.kernel);
        let src = full.data();
        let mut out = Vec::with_capacity(spec.out_ch * ipg * k * k);
        for o in 0..spec.out_ch {
            let (in_off, koff) = self.offsets(spec, o);
            for i in 0..ipg {
                for ky in 0..k {
                    let row = ((o * fipg + in_off + i) * fk + ky + koff) * fk + koff;
                    out.extend_from_slice(&src[row..row + k]);
                }
            }
        }
        Tensor::new(spec.weight_shape().to_vec(), out)
    }

    /// Inverse of [`WeightView::gather`]: a full-size gradient that is zero
    /// outside the view.
    pub fn scatter<T: Real>(&self, g: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
        let [_, fipg, fk, _] = self.full_shape();
        let (ipg, k) = (spec.in_per_group(), spec.kernel);
        let mut full = Tensor::zeros(self.full_shape().to_vec());
        let dst = full.data_mut();
        let src = g.data();
        for o in 0..spec.out_ch {
            let (in_off, koff) = self.offsets(spec, o);
            for i in 0..ipg {
                for ky in 0..k {
                    let row = ((o * fipg + in_off + i) * fk + ky + koff) * fk + koff;
                    let s = ((o * ipg + i) * k + ky) * k;
                    dst[row..row + k].copy_from_slice(&src[s..s + k]);
                }
            }
        }
        Ok(full)
    }
}

/// Per-output-channel standardization: zero mean, unit (population)
/// variance, `eps` added to the variance.
pub fn weight_standardize<T: Real>(w: &Tensor<T>, eps: f64) -> Tensor<T> {
    let o = w.shape()[0];
    let m = w.numel() / o;
    let mut out = w.clone();
    for chunk in out.data_mut().chunks_mut(m) {
        let (mean, inv) = moments(chunk, eps);
        for v in chunk.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn moments<T: Real>(xs: &[T], eps: f64) -> (T, T) {
    let n = T::from_f64(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::from_f64(eps)).sqrt())
}

fn standardize_backward<T: Real>(w: &Tensor<T>, g: &Tensor<T>, eps: f64) -> Tensor<T> {
    let o = w.shape()[0];
    let m = w.numel() / o;
    let mf = T::from_f64(m as f64);
    let mut out = g.clone();
    for (wc, gc) in w.data().chunks(m).zip(out.data_mut().chunks_mut(m)) {
        let (mean, inv) = moments(wc, eps);
        let gmean = gc.iter().copied().sum::<T>() / mf;
        let gw = wc
            .iter()
            .zip(gc.iter())
            .map(|(&x, &gv)| gv * (x - mean) * inv)
            .sum::<T>()
            / mf;
        for (gv, &x) in gc.iter_mut().zip(wc) {
            let xhat = (x - mean) * inv;
            *gv = inv * (*gv - gmean - xhat * gw);
        }
    }
    out
}

/// Range of output columns whose tap `kx` lands inside the input row.
#[inline]
fn valid_cols(out_w: usize, in_w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi_num = in_w as isize - 1 + pad as isize - kx as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / stride + 1).min(out_w);
    (lo.min(hi), hi)
}

/// Per-(sample, group) matrix blocks of a 1×1 stride-1 convolution.
fn pointwise(geom: &ConvGeometry) -> Option<(usize, usize, usize, usize)> {
    let s = &geom.spec;
    (s.kernel == 1 && s.stride == 1).then(|| (s.groups, s.in_per_group(), s.out_per_group(), geom.in_h * geom.in_w))
}

/// Unfolds one sample into a `(in_ch·k·k) × (out_h·out_w)` patch matrix.
fn im2col<T: Real>(x: &[T], geom: &ConvGeometry, col: &mut [T]) {
    let s = &geom.spec;
    let (ih, iw, oh, ow) = (geom.in_h, geom.in_w, geom.out_h, geom.out_w);
    let (k, st, pad) = (s.kernel, s.stride, s.padding());
    let mut rows = col.chunks_mut(oh * ow);
    for c in 0..s.in_ch {
        let xin = &x[c * ih * iw..][..ih * iw];
        for ky in 0..k {
            for kx in 0..k {
                let row = rows.next().expect("patch row");
                let (lo, hi) = valid_cols(ow, iw, st, kx, pad);
                for oy in 0..oh {
                    let r = &mut row[oy * ow..][..ow];
                    let iy = (oy * st + ky) as isize - pad as isize;
                    if iy < 0 || iy >= ih as isize || lo >= hi {
                        r.fill(T::zero());
                        continue;
                    }
                    let xrow = &xin[iy as usize * iw..][..iw];
                    r[..lo].fill(T::zero());
                    r[hi..].fill(T::zero());
                    for ox in lo..hi {
                        r[ox] = xrow[ox * st + kx - pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into one sample.
fn col2im<T: Real>(col: &[T], geom: &ConvGeometry, x: &mut [T]) {
    let s = &geom.spec;
    let (ih, iw, oh, ow) = (geom.in_h, geom.in_w, geom.out_h, geom.out_w);
    let (k, st, pad) = (s.kernel, s.stride, s.padding());
    let mut rows = col.chunks(oh * ow);
    for c in 0..s.in_ch {
        let xin = &mut x[c * ih * iw..][..ih * iw];
        for ky in 0..k {
            for kx in 0..k {
                let row = rows.next().expect("patch row");
                let (lo, hi) = valid_cols(ow, iw, st, kx, pad);
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * st + ky) as isize - pad as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let xrow = &mut xin[iy as usize * iw..][..iw];
                    for ox in lo..hi {
                        xrow[ox * st + kx - pad] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Convolutions that are neither pointwise nor depthwise go through patch matrices.
fn uses_patches(geom: &ConvGeometry) -> bool {
    let s = &geom.spec;
    s.kernel > 1 && s.in_per_group() > 1
}

fn forward_raw<T: Real>(x: &[T], geom: &ConvGeometry, w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let s = &geom.spec;
    let (ih, iw, oh, ow) = (geom.in_h, geom.in_w, geom.out_h, geom.out_w);
    let (ipg, opg, k, st, pad) = (s.in_per_group(), s.out_per_group(), s.kernel, s.stride, s.padding());
    let mut out = vec![T::zero(); geom.batch * s.out_ch * oh * ow];
    if let Some((groups, ipg, opg, hw)) = pointwise(geom) {
        for n in 0..geom.batch {
            let plane = &mut out[n * s.out_ch * hw..][..s.out_ch * hw];
            if let Some(b) = bias {
                for (row, &bv) in plane.chunks_mut(hw).zip(b) {
                    row.fill(bv);
                }
            }
            for g in 0..groups {
                let xs = &x[(n * s.in_ch + g * ipg) * hw..][..ipg * hw];
                let ws = &w[g * opg * ipg..][..opg * ipg];
                let os = &mut plane[g * opg * hw..][..opg * hw];
                T::gemm(opg, ipg, hw, (ws, ipg as isize, 1), (xs, hw as isize, 1), (os, hw as isize, 1));
            }
        }
        return out;
    }
    if uses_patches(geom) {
        let (groups, kk, ohw) = (s.groups, ipg * k * k, oh * ow);
        let mut col = vec![T::zero(); s.in_ch * k * k * ohw];
        for n in 0..geom.batch {
            im2col(&x[n * s.in_ch * ih * iw..][..s.in_ch * ih * iw], geom, &mut col);
            let plane = &mut out[n * s.out_ch * ohw..][..s.out_ch * ohw];
            if let Some(b) = bias {
                for (row, &bv) in plane.chunks_mut(ohw).zip(b) {
                    row.fill(bv);
                }
            }
            for g in 0..groups {
                let cs = &col[g * kk * ohw..][..kk * ohw];
                let ws = &w[g * opg * kk..][..opg * kk];
                let os = &mut plane[g * opg * ohw..][..opg * ohw];
                T::gemm(opg, kk, ohw, (ws, kk as isize, 1), (cs, ohw as isize, 1), (os, ohw as isize, 1));
            }
        }
        return out;
    }
    for n in 0..geom.batch {
        for oc in 0..s.out_ch {
            let plane = &mut out[(n * s.out_ch + oc) * oh * ow..][..oh * ow];
            if let Some(b) = bias {
                plane.fill(b[oc]);
            }
            let g = oc / opg;
            for icl in 0..ipg {
                let ic = g * ipg + icl;
                let xin = &x[(n * s.in_ch + ic) * ih * iw..][..ih * iw];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((oc * ipg + icl) * k + ky) * k + kx];
                        let (lo, hi) = valid_cols(ow, iw, st, kx, pad);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * st + ky) as isize - pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let xrow = &xin[iy as usize * iw..][..iw];
                            let orow = &mut plane[oy * ow..][..ow];
                            if st == 1 {
                                let shift = kx as isize - pad as isize;
                                let xs = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                                for (o, &xv) in orow[lo..hi].iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in lo..hi {
                                    orow[ox] += wv * xrow[ox * st + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn backward_input_raw<T: Real>(g: &[T], geom: &ConvGeometry, w: &[T]) -> Vec<T> {
    let s = &geom.spec;
    let (ih, iw, oh, ow) = (geom.in_h, geom.in_w, geom.out_h, geom.out_w);
    let (ipg, opg, k, st, pad) = (s.in_per_group(), s.out_per_group(), s.kernel, s.stride, s.padding());
    let mut gi = vec![T::zero(); geom.batch * s.in_ch * ih * iw];
    if let Some((groups, ipg, opg, hw)) = pointwise(geom) {
        for n in 0..geom.batch {
            for grp in 0..groups {
                let gs = &g[(n * s.out_ch + grp * opg) * hw..][..opg * hw];
                let ws = &w[grp * opg * ipg..][..opg * ipg];
                let is = &mut gi[(n * s.in_ch + grp * ipg) * hw..][..ipg * hw];
                T::gemm(ipg, opg, hw, (ws, 1, ipg as isize), (gs, hw as isize, 1), (is, hw as isize, 1));
            }
        }
        return gi;
    }
    if uses_patches(geom) {
        let (groups, kk, ohw) = (s.groups, ipg * k * k, oh * ow);
        let mut col = vec![T::zero(); s.in_ch * k * k * ohw];
        for n in 0..geom.batch {
            col.fill(T::zero());
            for grp in 0..groups {
                let gs = &g[(n * s.out_ch + grp * opg) * ohw..][..opg * ohw];
                let ws = &w[grp * opg * kk..][..opg * kk];
                let cs = &mut col[grp * kk * ohw..][..kk * ohw];
                T::gemm(kk, opg, ohw, (ws, 1, kk as isize), (gs, ohw as isize, 1), (cs, ohw as isize, 1));
            }
            col2im(&col, geom, &mut gi[n * s.in_ch * ih * iw..][..s.in_ch * ih * iw]);
        }
        return gi;
    }
    for n in 0..geom.batch {
        for oc in 0..s.out_ch {
            let gplane = &g[(n * s.out_ch + oc) * oh * ow..][..oh * ow];
            let grp = oc / opg;
            for icl in 0..ipg {
                let ic = grp * ipg + icl;
                let xin = &mut gi[(n * s.in_ch + ic) * ih * iw..][..ih * iw];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((oc * ipg + icl) * k + ky) * k + kx];
                        let (lo, hi) = valid_cols(ow, iw, st, kx, pad);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * st + ky) as isize - pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let xrow = &mut xin[iy as usize * iw..][..iw];
                            let grow = &gplane[oy * ow..][..ow];
                            for ox in lo..hi {
                                xrow[ox * st + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gi
}

fn backward_weight_raw<T: Real>(g: &[T], geom: &ConvGeometry, x: &[T]) -> Vec<T> {
    let s = &geom.spec;
    let (ih, iw, oh, ow) = (geom.in_h, geom.in_w, geom.out_h, geom.out_w);
    let (ipg, opg, k, st, pad) = (s.in_per_group(), s.out_per_group(), s.kernel, s.stride, s.padding());
    let mut gw = vec![T::zero(); s.out_ch * ipg * k * k];
    if let Some((groups, ipg, opg, hw)) = pointwise(geom) {
        for n in 0..geom.batch {
            for grp in 0..groups {
                let gs = &g[(n * s.out_ch + grp * opg) * hw..][..opg * hw];
                let xs = &x[(n * s.in_ch + grp * ipg) * hw..][..ipg * hw];
                let ws = &mut gw[grp * opg * ipg..][..opg * ipg];
                T::gemm(opg, hw, ipg, (gs, hw as isize, 1), (xs, 1, hw as isize), (ws, ipg as isize, 1));
            }
        }
        return gw;
    }
    if uses_patches(geom) {
        let (groups, kk, ohw) = (s.groups, ipg * k * k, oh * ow);
        let mut col = vec![T::zero(); s.in_ch * k * k * ohw];
        for n in 0..geom.batch {
            im2col(&x[n * s.in_ch * ih * iw..][..s.in_ch * ih * iw], geom, &mut col);
            for grp in 0..groups {
                let gs = &g[(n * s.out_ch + grp * opg) * ohw..][..opg * ohw];
                let cs = &col[grp * kk * ohw..][..kk * ohw];
                let ws = &mut gw[grp * opg * kk..][..opg * kk];
                T::gemm(opg, ohw, kk, (gs, ohw as isize, 1), (cs, 1, ohw as isize), (ws, kk as isize, 1));
            }
        }
        return gw;
    }
    for n in 0..geom.batch {
        for oc in 0..s.out_ch {
            let gplane = &g[(n * s.out_ch + oc) * oh * ow..][..oh * ow];
            let grp = oc / opg;
            for icl in 0..ipg {
                let ic = grp * ipg + icl;
                let xin = &x[(n * s.in_ch + ic) * ih * iw..][..ih * iw];
                for ky in 0..k {
                    for kx in 0..k {
                        let (lo, hi) = valid_cols(ow, iw, st, kx, pad);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let iy = (oy * st + ky) as isize - pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let xrow = &xin[iy as usize * iw..][..iw];
                            let grow = &gplane[oy * ow..][..ow];
                            for ox in lo..hi {
                                acc += grow[ox] * xrow[ox * st + kx - pad];
                            }
                        }
                        gw[((oc * ipg + icl) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Cross-correlation with zero padding. The input is kept for backward only
/// when the weight is trainable; the bias gradient needs only the upstream
/// gradient. With `standardize = Some(eps)` the kernel is standardized on
/// the fly, so the stored parameter stays raw.
pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: &Var<T>,
    spec: &ConvSpec,
    weight: &WeightView,
    bias: Option<ParamSlice>,
    standardize: Option<f64>,
) -> Result<Var<T>> {
    let (n, c, h, w) = x.value.dims4()?;
    if c != spec.in_ch {
        return Err(shape_err!("conv expects {} input channels, got {}", spec.in_ch, c));
    }
    let mut wt = weight.gather(store.value(weight.id), spec)?;
    if let Some(eps) = standardize {
        wt = weight_standardize(&wt, eps);
    }
    let bias_vals = bias.map(|b| slice_values(store, b)).transpose()?;
    if let Some(b) = bias_vals {
        if b.len() != spec.out_ch {
            return Err(shape_err!("conv bias of {} for {} outputs", b.len(), spec.out_ch));
        }
    }
    let geom = ConvGeometry {
        spec: *spec,
        batch: n,
        in_h: h,
        in_w: w,
        out_h: spec.out_dim(h),
        out_w: spec.out_dim(w),
    };
    let out = forward_raw(x.value.data(), &geom, wt.data(), bias_vals);
    let out = Tensor::new(vec![n, spec.out_ch, geom.out_h, geom.out_w], out)?;
    out.ensure_finite("conv2d")?;

    let mask = TrainMask {
        weight_trainable: store.is_trainable(weight.id),
        bias_trainable: bias.is_some_and(|b| store.is_trainable(b.id)),
    };
    if !tape.needs_node(&[x], mask.weight_trainable || mask.bias_trainable) {
        return Ok(tape.detached(out));
    }
    let mut saved = Vec::new();
    if mask.weight_trainable || tape.mode() == SaveMode::SaveAll {
        saved.push(Saved::full(x.value.clone()));
    }
    let mut params = Vec::new();
    if mask.weight_trainable {
        params.push(weight.id);
    }
    if mask.bias_trainable {
        params.extend(bias.map(|b| b.id));
    }
    let kind = OpKind::Conv {
        geom,
        weight: *weight,
        bias,
        standardize,
    };
    Ok(tape.record(kind, &[x], params, mask, saved, out))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Real>(
    store: &ParamStore<T>,
    geom: &ConvGeometry,
    view: &WeightView,
    bias: Option<ParamSlice>,
    standardize: Option<f64>,
    input: Option<Tensor<T>>,
    grad: &Tensor<T>,
    needs_input: bool,
) -> Result<BackwardStep<T>> {
    let spec = &geom.spec;
    let raw = view.gather(store.value(view.id), spec)?;
    let eff = match standardize {
        Some(eps) => weight_standardize(&raw, eps),
        None => raw.clone(),
    };
    let g = grad.data();
    let mut params = Vec::new();
    if store.is_trainable(view.id) {
        let x = input.ok_or_else(|| missing_input("conv2d"))?;
        let gw = Tensor::new(spec.weight_shape().to_vec(), backward_weight_raw(g, geom, x.data()))?;
        let gw = match standardize {
            Some(eps) => standardize_backward(&raw, &gw, eps),
            None => gw,
        };
        params.push((view.id, view.scatter(&gw, spec)?));
    }
    if let Some(b) = bias.filter(|b| store.is_trainable(b.id)) {
        let plane = geom.out_h * geom.out_w;
        let mut gb = vec![T::zero(); spec.out_ch];
        for n in 0..geom.batch {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += g[(n * spec.out_ch + oc) * plane..][..plane].iter().copied().sum::<T>();
            }
        }
        params.push((b.id, widen(store, b, gb)));
    }
    let gi = if needs_input {
        let shape = vec![geom.batch, spec.in_ch, geom.in_h, geom.in_w];
        Some(Tensor::new(shape, backward_input_raw(g, geom, eff.data()))?)
    } else {
        None
    };
    Ok(BackwardStep {
        inputs: vec![gi],
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution used as an oracle.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: &ConvSpec) -> Tensor<f64> {
        let (n, _, h, wd) = x.dims4().unwrap();
        let (oh, ow) = (s.out_dim(h), s.out_dim(wd));
        let p = s.padding() as isize;
        let mut out = Tensor::zeros(vec![n, s.out_ch, oh, ow]);
        for bn in 0..n {
            for oc in 0..s.out_ch {
                let g = oc / s.out_per_group();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oc];
                        for icl in 0..s.in_per_group() {
                            let ic = g * s.in_per_group() + icl;
                            for ky in 0..s.kernel {
                                for kx in 0..s.kernel {
                                    let iy = (oy * s.stride + ky) as isize - p;
                                    let ix = (ox * s.stride + kx) as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((bn * s.in_ch + ic) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((oc * s.in_per_group() + icl) * s.kernel + ky) * s.kernel + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((bn * s.out_ch + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn run(x: &Tensor<f64>, w: Tensor<f64>, b: Option<Tensor<f64>>, s: &ConvSpec) -> Tensor<f64> {
        let mut store = ParamStore::new();
        let wid = store.add("w", ParamGroup::Weight, w).unwrap();
        let bias = b.map(|b| {
            let len = b.numel();
            ParamSlice {
                id: store.add("b", ParamGroup::Bias, b).unwrap(),
                len,
            }
        });
        let mut tape = Tape::inference();
        let xv = tape.input(x.clone());
        conv2d(&mut tape, &store, &xv, s, &WeightView::dense(wid, s), bias, None)
            .unwrap()
            .value
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_1x1() {
        let s = ConvSpec::new(3, 3, 1, 1, 1);
        let w = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![2, 3, 4, 5]);
        assert_eq!(run(&x, w, None, &s), x);
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let s = ConvSpec::new(1, 1, 3, 1, 1);
        let x = Tensor::full(vec![1, 1, 5, 5], 1.0);
        let out = run(&x, Tensor::full(vec![1, 1, 3, 3], 1.0), None, &s);
        assert_eq!(out.data()[2 * 5 + 2], 9.0);
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn grouped_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (s, h) in [
            (ConvSpec::new(2, 4, 3, 1, 2), 4),
            (ConvSpec::new(4, 4, 5, 2, 4), 7),
            (ConvSpec::new(6, 4, 3, 2, 2), 6),
            (ConvSpec::new(3, 2, 7, 1, 1), 5),
        ] {
            let x = rand_tensor(&mut rng, vec![2, s.in_ch, h, h + 1]);
            let w = rand_tensor(&mut rng, s.weight_shape().to_vec());
            let b = rand_tensor(&mut rng, vec![s.out_ch]);
            let got = run(&x, w.clone(), Some(b.clone()), &s);
            let want = naive(&x, &w, b.data(), &s);
            assert!(got.max_abs_diff(&want) < 1e-12, "{s:?}");
        }
    }

    #[test]
    fn depthwise_equals_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ConvSpec::new(3, 3, 3, 1, 3);
        let x = rand_tensor(&mut rng, vec![1, 3, 5, 5]);
        let w = rand_tensor(&mut rng, vec![3, 1, 3, 3]);
        let out = run(&x, w.clone(), None, &s);
        let single = ConvSpec::new(1, 1, 3, 1, 1);
        for c in 0..3 {
            let xc = Tensor::new(vec![1, 1, 5, 5], x.data()[c * 25..(c + 1) * 25].to_vec()).unwrap();
            let wc = Tensor::new(vec![1, 1, 3, 3], w.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
            assert_eq!(run(&xc, wc, None, &single).data(), &out.data()[c * 25..(c + 1) * 25]);
        }
    }

    #[test]
    fn centre_slice_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let big = ConvSpec::new(4, 4, 7, 1, 4);
        let small = ConvSpec::new(4, 4, 3, 1, 4);
        let w = rand_tensor(&mut rng, big.weight_shape().to_vec());
        let view = WeightView::dense(ParamId(0), &big);
        let cut = view.gather(&w, &small).unwrap();
        for c in 0..4 {
            for ky in 0..3 {
                for kx in 0..3 {
                    assert_eq!(
                        cut.data()[(c * 3 + ky) * 3 + kx],
                        w.data()[(c * 7 + ky + 2) * 7 + kx + 2]
                    );
                }
            }
        }
        let back = view.scatter(&cut, &small).unwrap();
        assert_eq!(back.data().iter().filter(|v| **v != 0.0).count(), 36);
    }

    #[test]
    fn finer_groups_from_coarser_weight() {
        // groups=4 view of a groups=2 weight: each output reads the
        // sub-range of its stored group.
        let stored = ConvSpec::new(8, 8, 3, 1, 2);
        let view = WeightView::dense(ParamId(0), &stored);
        let w = Tensor::<f64>::from_fn(stored.weight_shape().to_vec(), |i| i as f64);
        let fine = ConvSpec::new(8, 8, 3, 1, 4);
        let cut = view.gather(&w, &fine).unwrap();
        assert_eq!(cut.shape(), &[8, 2, 3, 3]);
        // output 2 is in fine group 1 (inputs 2,3) and stored group 0 (inputs 0..4)
        assert_eq!(cut.data()[(2 * 2) * 9], w.data()[(2 * 4 + 2) * 9]);
        // output 5: fine group 2 (inputs 4,5), stored group 1 (inputs 4..8) → offset 0
        assert_eq!(cut.data()[(5 * 2) * 9], w.data()[(5 * 4) * 9]);
        assert!(view.check(&ConvSpec::new(8, 8, 3, 1, 1)).is_err());
    }

    #[test]
    fn standardize_examples() {
        let w = Tensor::<f64>::from_f64(vec![2, 1, 1, 2], &[1., -1., 3., 3.]).unwrap();
        let s = weight_standardize(&w, 1e-5);
        assert!((s.data()[0] - 1.0).abs() < 1e-5 && (s.data()[1] + 1.0).abs() < 1e-5);
        assert_eq!(&s.data()[2..], &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::from_fn(vec![4, 2, 3, 3], |_| rng.gen_range(-3.0..5.0));
        let s = weight_standardize(&w, 1e-5);
        for c in s.data().chunks(18) {
            let mean = c.iter().sum::<f64>() / 18.0;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn bad_groups_are_spec_errors() {
        assert!(matches!(ConvSpec::new(3, 4, 3, 1, 2).validate(), Err(crate::Error::Spec(_))));
        assert!(ConvSpec::new(4, 4, 4, 1, 1).validate().is_err());
        assert!(ConvSpec::new(4, 4, 3, 3, 1).validate().is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn matches_oracle_and_adjoints(
            groups in 1usize..=3, ipg in 1usize..=2, opg in 1usize..=2,
            k in proptest::sample::select(vec![1usize, 3, 5, 7]), stride in 1usize..=2,
            h in 1usize..=6, w in 1usize..=6, seed in 0u64..1000,
        ) {
            let s = ConvSpec::new(groups * ipg, groups * opg, k, stride, groups);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, vec![2, s.in_ch, h, w]);
            let wt = rand_tensor(&mut rng, s.weight_shape().to_vec());
            let b = rand_tensor(&mut rng, vec![s.out_ch]);
            let want = naive(&x, &wt, b.data(), &s);
            proptest::prop_assert!(run(&x, wt.clone(), Some(b.clone()), &s).max_abs_diff(&want) < 1e-12);

            // <g, conv(x; w)> is bilinear, so its gradients are recovered exactly
            let mut store = ParamStore::new();
            let wid = store.add("w", ParamGroup::Weight, wt.clone()).unwrap();
            store.set_trainable(wid, true);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let y = conv2d(&mut tape, &store, &xv, &s, &WeightView::dense(wid, &s), None, None).unwrap();
            let g = rand_tensor(&mut rng, y.shape().to_vec());
            let inner: f64 = g.data().iter().zip(y.value.data()).map(|(a, b)| a * b).sum();
            let (grads, inputs) = crate::autograd::backward_with_inputs(&mut tape, &store, &g).unwrap();
            let gx = &inputs[&xv.id];
            let via_x: f64 = gx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = grads.get(wid).unwrap().data().iter().zip(wt.data()).map(|(a, b)| a * b).sum();
            proptest::prop_assert!((via_x - inner).abs() < 1e-9 * (1.0 + inner.abs()));
            proptest::prop_assert!((via_w - inner).abs() < 1e-9 * (1.0 + inner.abs()));
        }
    }
}
