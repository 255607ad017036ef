use crate::autograd::{ParamSlice, Tape, Var};
use crate::error::Result;
use crate::layers::{self, ActKind, ConvSpec, WeightView, GN_CHANNELS_PER_GROUP, NORM_EPS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// The operations a model is written against. One forward definition drives
/// both real execution on a tape and symbolic cost accounting.
pub trait Ctx<T: Real> {
    type V: Clone;

    fn store(&self) -> &ParamStore<T>;
    fn dims(&self, v: &Self::V) -> Vec<usize>;

    fn conv(
        &mut self,
        name: &str,
        x: &Self::V,
        spec: &ConvSpec,
        weight: &WeightView,
        bias: ParamSlice,
        standardize: bool,
    ) -> Result<Self::V>;
    fn group_norm(&mut self, name: &str, x: &Self::V, gamma: ParamSlice, beta: ParamSlice) -> Result<Self::V>;
    fn frozen_norm(&mut self, name: &str, x: &Self::V, affine: [ParamSlice; 4]) -> Result<Self::V>;
    fn act(&mut self, name: &str, x: &Self::V, kind: ActKind) -> Result<Self::V>;
    fn pool(&mut self, name: &str, x: &Self::V) -> Result<Self::V>;
    fn upsample(&mut self, name: &str, x: &Self::V, h: usize, w: usize) -> Result<Self::V>;
    fn add(&mut self, name: &str, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// An untracked N×C×H×W value shaped like `like`, channel `c` holding `values[c]`.
    fn channel_constant(&mut self, name: &str, like: &Self::V, values: ParamSlice) -> Result<Self::V>;
    fn global_pool(&mut self, name: &str, x: &Self::V) -> Result<Self::V>;
    fn linear(&mut self, name: &str, x: &Self::V, weight: ParamId, bias: ParamId) -> Result<Self::V>;
    /// Parameters held by a unit that is skipped in this pass.
    fn idle(&mut self, _name: &str, _params: &[(ParamId, usize)]) {}
}

pub const WS_EPS: f64 = 1e-5;

/// Runs a model on a tape.
pub struct Exec<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Real> Exec<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Exec { tape, store }
    }
}

impl<T: Real> Ctx<T> for Exec<'_, T> {
    type V = Var<T>;

    fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn dims(&self, v: &Var<T>) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn conv(
        &mut self,
        _: &str,
        x: &Var<T>,
        spec: &ConvSpec,
        weight: &WeightView,
        bias: ParamSlice,
        standardize: bool,
    ) -> Result<Var<T>> {
        layers::conv2d(self.tape, self.store, x, spec, weight, Some(bias), standardize.then_some(WS_EPS))
    }

    fn group_norm(&mut self, _: &str, x: &Var<T>, gamma: ParamSlice, beta: ParamSlice) -> Result<Var<T>> {
        layers::group_norm(self.tape, self.store, x, gamma, beta, GN_CHANNELS_PER_GROUP, NORM_EPS)
    }

    fn frozen_norm(&mut self, _: &str, x: &Var<T>, [g, b, m, v]: [ParamSlice; 4]) -> Result<Var<T>> {
        layers::frozen_norm(self.tape, self.store, x, g, b, m, v, NORM_EPS)
    }

    fn act(&mut self, _: &str, x: &Var<T>, kind: ActKind) -> Result<Var<T>> {
        layers::activation(self.tape, x, kind)
    }

    fn pool(&mut self, _: &str, x: &Var<T>) -> Result<Var<T>> {
        layers::avg_pool2(self.tape, x)
    }

    fn upsample(&mut self, _: &str, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        layers::bilinear_upsample(self.tape, x, h, w)
    }

    fn add(&mut self, _: &str, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        layers::add(self.tape, a, b)
    }

    fn channel_constant(&mut self, _: &str, like: &Var<T>, values: ParamSlice) -> Result<Var<T>> {
        let (n, c, h, w) = like.value.dims4()?;
        let vals = &self.store.value(values.id).data()[..values.len];
        let t = Tensor::from_fn(vec![n, c, h, w], |i| vals[(i / (h * w)) % c]);
        Ok(self.tape.leaf(t, false))
    }

    fn global_pool(&mut self, _: &str, x: &Var<T>) -> Result<Var<T>> {
        layers::global_avg_pool(self.tape, x)
    }

    fn linear(&mut self, _: &str, x: &Var<T>, weight: ParamId, bias: ParamId) -> Result<Var<T>> {
        layers::linear(self.tape, self.store, x, weight, Some(bias))
    }
}
