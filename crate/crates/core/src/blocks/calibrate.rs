use super::ctx::{Ctx, Exec};
use super::model::Model;
use crate::autograd::{ParamSlice, Tape, Var};
use crate::error::Result;
use crate::layers::{ActKind, ConvSpec, WeightView};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Sets the stored mean and variance of every frozen-statistics norm to the
/// per-channel moments it sees on `images`, in forward order.
pub fn calibrate_norms<T: Real>(model: &Model, store: &mut ParamStore<T>, images: &Tensor<T>) -> Result<()> {
    let mut ctx = Calibrate {
        store,
        tape: Tape::inference(),
    };
    let x = ctx.tape.input(images.clone());
    model.forward(&mut ctx, &x)?;
    Ok(())
}

struct Calibrate<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    tape: Tape<T>,
}

impl<T: Real> Calibrate<'_, T> {
    fn exec(&mut self) -> Exec<'_, T> {
        Exec::new(&mut self.tape, self.store)
    }
}

impl<T: Real> Ctx<T> for Calibrate<'_, T> {
    type V = Var<T>;

    fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn dims(&self, v: &Var<T>) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn conv(&mut self, n: &str, x: &Var<T>, s: &ConvSpec, w: &WeightView, b: ParamSlice, ws: bool) -> Result<Var<T>> {
        self.exec().conv(n, x, s, w, b, ws)
    }

    fn group_norm(&mut self, n: &str, x: &Var<T>, g: ParamSlice, b: ParamSlice) -> Result<Var<T>> {
        self.exec().group_norm(n, x, g, b)
    }

    fn frozen_norm(&mut self, n: &str, x: &Var<T>, p: [ParamSlice; 4]) -> Result<Var<T>> {
        let (bn, c, h, w) = x.value.dims4()?;
        let plane = h * w;
        let count = (bn * plane) as f64;
        let (mut mean, mut var) = (vec![0.0f64; c], vec![0.0f64; c]);
        for (i, chunk) in x.value.data().chunks(plane).enumerate() {
            mean[i % c] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, chunk) in x.value.data().chunks(plane).enumerate() {
            let m = mean[i % c];
            var[i % c] += chunk.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
        let [_, _, ms, vs] = p;
        for ci in 0..c {
            self.store.value_mut(ms.id).data_mut()[ci] = T::from_f64(mean[ci]);
            self.store.value_mut(vs.id).data_mut()[ci] = T::from_f64(var[ci] / count);
        }
        self.exec().frozen_norm(n, x, p)
    }

    fn act(&mut self, n: &str, x: &Var<T>, kind: ActKind) -> Result<Var<T>> {
        self.exec().act(n, x, kind)
    }

    fn pool(&mut self, n: &str, x: &Var<T>) -> Result<Var<T>> {
        self.exec().pool(n, x)
    }

    fn upsample(&mut self, n: &str, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        self.exec().upsample(n, x, h, w)
    }

    fn add(&mut self, n: &str, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.exec().add(n, a, b)
    }

    fn channel_constant(&mut self, n: &str, like: &Var<T>, values: ParamSlice) -> Result<Var<T>> {
        self.exec().channel_constant(n, like, values)
    }

    fn global_pool(&mut self, n: &str, x: &Var<T>) -> Result<Var<T>> {
        self.exec().global_pool(n, x)
    }

    fn linear(&mut self, n: &str, x: &Var<T>, w: ParamId, b: ParamId) -> Result<Var<T>> {
        self.exec().linear(n, x, w, b)
    }
}
