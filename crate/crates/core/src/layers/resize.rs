use crate::autograd::{OpKind, Tape, TrainMask, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Output side of a 2×2 pool: odd sides replicate their last row/column.
pub fn pooled_dim(d: usize) -> usize {
    d.div_ceil(2)
}

fn shape4<T: Real>(t: &Tensor<T>) -> Result<[usize; 4]> {
    let (n, c, h, w) = t.dims4()?;
    Ok([n, c, h, w])
}

fn record_linear_op<T: Real>(tape: &mut Tape<T>, kind: OpKind, inputs: &[&Var<T>], out: Tensor<T>) -> Var<T> {
    if tape.needs_node(inputs, false) {
        tape.record(kind, inputs, Vec::new(), TrainMask::default(), Vec::new(), out)
    } else {
        tape.detached(out)
    }
}

/// 2×2 average pooling with stride 2. Saves nothing.
pub fn avg_pool2<T: Real>(tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let [n, c, h, w] = shape4(&x.value)?;
    let (oh, ow) = (pooled_dim(h), pooled_dim(w));
    let xd = x.value.data();
    let quarter = T::from_f64(0.25);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let plane = &xd[p * h * w..][..h * w];
        for oy in 0..oh {
            let (r0, r1) = (2 * oy, (2 * oy + 1).min(h - 1));
            for ox in 0..ow {
                let (c0, c1) = (2 * ox, (2 * ox + 1).min(w - 1));
                let s = (plane[r0 * w + c0] + plane[r0 * w + c1]) + (plane[r1 * w + c0] + plane[r1 * w + c1]);
                out.push(s * quarter);
            }
        }
    }
    let out = Tensor::new(vec![n, c, oh, ow], out)?;
    Ok(record_linear_op(tape, OpKind::AvgPool2 { in_shape: [n, c, h, w] }, &[x], out))
}

pub(super) fn avg_pool2_backward<T: Real>([n, c, h, w]: [usize; 4], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (oh, ow) = (pooled_dim(h), pooled_dim(w));
    let gd = grad.data();
    let quarter = T::from_f64(0.25);
    let mut gi = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let plane = &mut gi[p * h * w..][..h * w];
        for oy in 0..oh {
            let (r0, r1) = (2 * oy, (2 * oy + 1).min(h - 1));
            for ox in 0..ow {
                let (c0, c1) = (2 * ox, (2 * ox + 1).min(w - 1));
                let g = gd[(p * oh + oy) * ow + ox] * quarter;
                plane[r0 * w + c0] += g;
                plane[r0 * w + c1] += g;
                plane[r1 * w + c0] += g;
                plane[r1 * w + c1] += g;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], gi)
}

/// Source taps and weight along one axis (align-corners = false).
fn taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to a target at least as large as the input. Constant
/// fields stay exactly constant.
pub fn bilinear_upsample<T: Real>(tape: &mut Tape<T>, x: &Var<T>, target_h: usize, target_w: usize) -> Result<Var<T>> {
    let [n, c, h, w] = shape4(&x.value)?;
    if target_h < h || target_w < w {
        return Err(shape_err!("upsample target {}×{} smaller than {}×{}", target_h, target_w, h, w));
    }
    let ty = taps(target_h, h);
    let tx = taps(target_w, w);
    let xd = x.value.data();
    let mut out = Vec::with_capacity(n * c * target_h * target_w);
    for p in 0..n * c {
        let plane = &xd[p * h * w..][..h * w];
        for &(y0, y1, ly) in &ty {
            let ly = T::from_f64(ly);
            for &(x0, x1, lx) in &tx {
                let lx = T::from_f64(lx);
                let (v00, v01) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                let (v10, v11) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                let top = v00 + (v01 - v00) * lx;
                let bot = v10 + (v11 - v10) * lx;
                out.push(top + (bot - top) * ly);
            }
        }
    }
    let out = Tensor::new(vec![n, c, target_h, target_w], out)?;
    Ok(record_linear_op(tape, OpKind::Upsample { in_shape: [n, c, h, w] }, &[x], out))
}

pub(super) fn upsample_backward<T: Real>([n, c, h, w]: [usize; 4], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, _, th, tw] = shape4(grad)?;
    let ty = taps(th, h);
    let tx = taps(tw, w);
    let gd = grad.data();
    let mut gi = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let plane = &mut gi[p * h * w..][..h * w];
        let gp = &gd[p * th * tw..][..th * tw];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64(lx);
                let g = gp[oy * tw + ox];
                let one = T::one();
                plane[y0 * w + x0] += g * (one - lx) * (one - ly);
                plane[y0 * w + x1] += g * lx * (one - ly);
                plane[y1 * w + x0] += g * (one - lx) * ly;
                plane[y1 * w + x1] += g * lx * ly;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], gi)
}

/// N×C×H×W → N×C spatial mean.
pub fn global_avg_pool<T: Real>(tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let [n, c, h, w] = shape4(&x.value)?;
    let plane = h * w;
    let inv = T::from_f64(plane as f64);
    let out: Vec<T> = x
        .value
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() / inv)
        .collect();
    let out = Tensor::new(vec![n, c], out)?;
    Ok(record_linear_op(tape, OpKind::GlobalAvgPool { in_shape: [n, c, h, w] }, &[x], out))
}

pub(super) fn global_avg_pool_backward<T: Real>([n, c, h, w]: [usize; 4], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let plane = h * w;
    let inv = T::from_f64(plane as f64);
    let mut gi = Vec::with_capacity(n * c * plane);
    for &g in grad.data() {
        gi.extend(std::iter::repeat(g / inv).take(plane));
    }
    Tensor::new(vec![n, c, h, w], gi)
}

/// Elementwise sum of equally shaped values. Saves nothing.
pub fn add<T: Real>(tape: &mut Tape<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let mut out = a.value.clone();
    out.add_assign(&b.value)?;
    out.ensure_finite("add")?;
    Ok(record_linear_op(tape, OpKind::Add, &[a, b], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(x: Tensor<f64>) -> Tensor<f64> {
        let mut t = Tape::inference();
        let v = t.input(x);
        avg_pool2(&mut t, &v).unwrap().value
    }

    fn up(x: Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
        let mut t = Tape::inference();
        let v = t.input(x);
        bilinear_upsample(&mut t, &v, h, w).unwrap().value
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(pool(Tensor::full(vec![1, 2, 5, 3], 0.1)).data(), &[0.1; 2 * 3 * 2]);
        assert_eq!(pool(Tensor::from_f64(vec![1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap()).data(), &[2.5]);
        let ramp = Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f64);
        let got = pool(ramp.clone());
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += ramp.data()[(2 * oy + dy) * 4 + 2 * ox + dx];
                    }
                }
                assert_eq!(got.data()[oy * 2 + ox], s / 4.0);
            }
        }
    }

    #[test]
    fn odd_pool_replicates_edges() {
        let x = Tensor::from_f64(vec![1, 1, 3, 1], &[1., 2., 5.]).unwrap();
        assert_eq!(pool(x).data(), &[1.5, 5.0]);
    }

    #[test]
    fn upsample_examples() {
        assert_eq!(up(Tensor::full(vec![1, 2, 3, 2], 0.3), 7, 5).data(), &[0.3; 70]);
        let x = Tensor::from_fn(vec![1, 1, 3, 4], |i| (i * i) as f64 * 0.1);
        assert_eq!(up(x.clone(), 3, 4), x);

        let x = Tensor::from_f64(vec![1, 1, 2, 2], &[0., 1., 0., 1.]).unwrap();
        let out = up(x, 4, 4);
        // independent evaluation of the align-corners=false formula
        let row: Vec<f64> = (0..4)
            .map(|o| {
                let s = ((o as f64 + 0.5) * 0.5 - 0.5f64).max(0.0);
                let i0 = s.floor().min(1.0);
                let i1 = (i0 + 1.0).min(1.0);
                let l = s - i0;
                i0 * (1.0 - l) + i1 * l
            })
            .collect();
        for r in out.data().chunks(4) {
            assert_eq!(r, &row[..]);
            assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_rejects_shrinking() {
        let mut t = Tape::<f64>::inference();
        let v = t.input(Tensor::zeros(vec![1, 1, 4, 4]));
        assert!(bilinear_upsample(&mut t, &v, 2, 4).is_err());
    }

    #[test]
    fn pool_then_upsample_keeps_constants() {
        for &c in &[0.1, -3.7, 1e-3, 12345.678] {
            let x = Tensor::full(vec![2, 3, 7, 6], c);
            let back = up(pool(x.clone()), 7, 6);
            assert_eq!(back, x);
        }
    }

    #[test]
    fn global_pool_of_constant() {
        let mut t = Tape::inference();
        let v = t.input(Tensor::full(vec![2, 3, 4, 4], 0.5f64));
        let p = global_avg_pool(&mut t, &v).unwrap().value;
        assert_eq!(p.shape(), &[2, 3]);
        assert!(p.data().iter().all(|&x| x == 0.5));
    }
}
