use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::arch::{ArchitectureSpec, LiteResidualSpec, MbBlockSpec, INPUT_CHANNELS};
use super::ctx::{Ctx, Exec};
use crate::autograd::{ParamSlice, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{ActKind, ConvSpec, WeightView};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormUnit {
    /// γ, β, stored mean, stored variance.
    Frozen([ParamSlice; 4]),
    Group { gamma: ParamSlice, beta: ParamSlice },
}

impl NormUnit {
    pub fn gamma(&self) -> ParamSlice {
        match *self {
            NormUnit::Frozen([g, ..]) | NormUnit::Group { gamma: g, .. } => g,
        }
    }

    pub fn beta(&self) -> ParamSlice {
        match *self {
            NormUnit::Frozen([_, b, ..]) | NormUnit::Group { beta: b, .. } => b,
        }
    }
}

/// Convolution with its own bias, followed by a normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: WeightView,
    pub bias: ParamSlice,
    pub norm: NormUnit,
}

impl ConvUnit {
    pub fn forward<T: Real, C: Ctx<T>>(&self, ctx: &mut C, x: &C::V) -> Result<C::V> {
        let standardize = matches!(self.norm, NormUnit::Group { .. });
        let y = ctx.conv(&format!("{}.conv", self.name), x, &self.spec, &self.weight, self.bias, standardize)?;
        let norm = format!("{}.norm", self.name);
        match self.norm {
            NormUnit::Frozen(p) => ctx.frozen_norm(&norm, &y, p),
            NormUnit::Group { gamma, beta } => ctx.group_norm(&norm, &y, gamma, beta),
        }
    }

    /// Parameters with their active element counts.
    pub fn params(&self) -> Vec<(ParamId, usize)> {
        let c = self.spec.out_ch;
        let mut p = vec![(self.weight.id, self.spec.weight_shape().iter().product()), (self.bias.id, c)];
        p.push((self.norm.gamma().id, c));
        p.push((self.norm.beta().id, c));
        p
    }

    /// The same unit restricted to a smaller conv cut from the stored weight.
    pub fn view(&self, spec: ConvSpec) -> Result<ConvUnit> {
        self.weight.check(&spec)?;
        let cut = |s: ParamSlice| ParamSlice { id: s.id, len: spec.out_ch };
        let norm = match self.norm {
            NormUnit::Frozen(p) => NormUnit::Frozen(p.map(cut)),
            NormUnit::Group { gamma, beta } => NormUnit::Group {
                gamma: cut(gamma),
                beta: cut(beta),
            },
        };
        Ok(ConvUnit {
            name: self.name.clone(),
            spec,
            weight: self.weight,
            bias: cut(self.bias),
            norm,
        })
    }
}

/// pool → group conv → GN → ReLU → group conv → GN → upsample.
#[derive(Clone, Debug, PartialEq)]
pub struct LiteBranch {
    pub name: String,
    pub spec: LiteResidualSpec,
    pub conv1: ConvUnit,
    pub conv2: ConvUnit,
}

impl LiteBranch {
    /// A branch whose last scale is frozen at zero outputs its constant shift
    /// and needs no evaluation.
    pub fn is_inert<T: Real>(&self, store: &ParamStore<T>) -> bool {
        let g = self.conv2.norm.gamma();
        !store.is_trainable(g.id) && store.value(g.id).data()[..g.len].iter().all(|v| *v == T::zero())
    }

    /// Returns `None` when the branch contributes exactly nothing.
    pub fn forward<T: Real, C: Ctx<T>>(&self, ctx: &mut C, a: &C::V, main: &C::V) -> Result<Option<C::V>> {
        if self.is_inert(ctx.store()) {
            for u in [&self.conv1, &self.conv2] {
                ctx.idle(&u.name, &u.params());
            }
            let b = self.conv2.norm.beta();
            if ctx.store().value(b.id).data()[..b.len].iter().all(|v| *v == T::zero()) {
                return Ok(None);
            }
            return ctx.channel_constant(&format!("{}.const", self.name), main, b).map(Some);
        }
        let p = ctx.pool(&format!("{}.pool", self.name), a)?;
        let h = self.conv1.forward(ctx, &p)?;
        let h = ctx.act(&format!("{}.relu", self.name), &h, ActKind::Relu)?;
        let h = self.conv2.forward(ctx, &h)?;
        let (hd, md) = (ctx.dims(&h), ctx.dims(main));
        if hd[2..] == md[2..] {
            return Ok(Some(h));
        }
        ctx.upsample(&format!("{}.upsample", self.name), &h, md[2], md[3]).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MbBlock {
    pub name: String,
    pub spec: MbBlockSpec,
    pub expand: ConvUnit,
    pub depthwise: ConvUnit,
    pub project: ConvUnit,
    pub lite: Option<LiteBranch>,
}

impl MbBlock {
    /// `F_W(a) + b`, plus the skip and the lite residual of `a`.
    pub fn forward<T: Real, C: Ctx<T>>(&self, ctx: &mut C, a: &C::V) -> Result<C::V> {
        let c = ctx.dims(a)[1];
        if c != self.spec.in_ch {
            return Err(Error::Structural(format!(
                "{} expects {} channels, got {c}",
                self.name, self.spec.in_ch
            )));
        }
        let h = self.expand.forward(ctx, a)?;
        let h = ctx.act(&format!("{}.expand.relu", self.name), &h, ActKind::Relu)?;
        let h = self.depthwise.forward(ctx, &h)?;
        let h = ctx.act(&format!("{}.depthwise.relu", self.name), &h, ActKind::Relu)?;
        let mut out = self.project.forward(ctx, &h)?;
        if self.spec.has_skip() {
            out = ctx.add(&format!("{}.skip", self.name), &out, a)?;
        }
        if let Some(lite) = &self.lite {
            if let Some(r) = lite.forward(ctx, a, &out)? {
                out = ctx.add(&format!("{}.residual", lite.name), &out, &r)?;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Head {
    /// Global average pool, then `features·W + b`.
    pub fn forward<T: Real, C: Ctx<T>>(&self, ctx: &mut C, features: &C::V) -> Result<C::V> {
        let pooled = ctx.global_pool("head.pool", features)?;
        let d = ctx.dims(&pooled)[1];
        let w = ctx.store().value(self.weight).shape()[0];
        if d != w {
            return Err(Error::Structural(format!("head expects {w} features, got {d}")));
        }
        ctx.linear("head.linear", &pooled, self.weight, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchitectureSpec,
    pub stem: ConvUnit,
    pub blocks: Vec<MbBlock>,
    pub head: Head,
}

impl Model {
    pub fn forward<T: Real, C: Ctx<T>>(&self, ctx: &mut C, x: &C::V) -> Result<C::V> {
        let d = ctx.dims(x);
        if d.len() != 4 || d[1] != INPUT_CHANNELS {
            return Err(Error::Shape(format!("model input must be N×{INPUT_CHANNELS}×H×W, got {d:?}")));
        }
        let mut h = x.clone();
        for i in 0..self.segments() {
            h = self.forward_segment(ctx, i, &h)?;
        }
        Ok(h)
    }

    /// Stem, then one segment per block, then the head.
    pub fn segments(&self) -> usize {
        self.blocks.len() + 2
    }

    pub fn forward_segment<T: Real, C: Ctx<T>>(&self, ctx: &mut C, i: usize, x: &C::V) -> Result<C::V> {
        match i {
            0 => {
                let h = self.stem.forward(ctx, x)?;
                ctx.act("stem.relu", &h, ActKind::Relu)
            }
            i if i <= self.blocks.len() => self.blocks[i - 1].forward(ctx, x),
            i if i == self.blocks.len() + 1 => self.head.forward(ctx, x),
            _ => Err(Error::Contract(format!("model has {} segments, asked for {i}", self.segments()))),
        }
    }

    /// The segment whose parameters are named with `name`'s prefix.
    pub fn segment_of(&self, name: &str) -> Option<usize> {
        let under = |prefix: &str| name.strip_prefix(prefix).is_some_and(|r| r.starts_with('.'));
        if under("stem") {
            return Some(0);
        }
        if under("head") {
            return Some(self.blocks.len() + 1);
        }
        self.blocks.iter().position(|b| under(&b.name)).map(|i| i + 1)
    }

    /// Logits for a batch, recorded on `tape`.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, images: Tensor<T>) -> Result<Var<T>> {
        let x = tape.input(images);
        self.forward(&mut Exec::new(tape, store), &x)
    }

    /// Logits without recording anything.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, images: Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.logits(&mut Tape::inference(), store, images)?.value)
    }

    /// The same network with every lite residual removed.
    pub fn without_lite(&self) -> Model {
        let mut m = self.clone();
        for b in &mut m.blocks {
            b.lite = None;
        }
        m
    }

    pub fn units(&self) -> impl Iterator<Item = &ConvUnit> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| {
            [&b.expand, &b.depthwise, &b.project]
                .into_iter()
                .chain(b.lite.iter().flat_map(|l| [&l.conv1, &l.conv2]))
        }))
    }
}

/// How the parameters of a new model are obtained.
#[derive(Clone, Debug)]
pub enum InitStrategy {
    /// Every parameter except the head copied by name from a trained store.
    PretrainedCopy(ParamStore<f32>),
    /// Fresh random weights; the last scale of every lite residual is zero.
    RandomZeroScale,
}

struct Builder<'a> {
    store: ParamStore<f32>,
    rng: ChaCha8Rng,
    source: Option<&'a ParamStore<f32>>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, group: ParamGroup, shape: Vec<usize>, init: Init) -> Result<ParamId> {
        let t = match init {
            Init::He(fan_in) => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
            }
            Init::Const(v) => Tensor::full(shape, v),
        };
        let t = match (self.source, group) {
            (Some(src), g) if g != ParamGroup::Head => {
                let id = src
                    .find(&name)
                    .ok_or_else(|| Error::Structural(format!("pretrained store has no parameter {name}")))?;
                let v = src.value(id);
                if v.shape() != t.shape() {
                    return Err(Error::Structural(format!(
                        "pretrained {name} has shape {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    )));
                }
                v.clone()
            }
            _ => t,
        };
        self.store.add(name, group, t)
    }

    fn unit(&mut self, name: &str, spec: ConvSpec, group_norm: bool, last_scale: f32) -> Result<ConvUnit> {
        spec.validate()?;
        let (wg, bg) = if group_norm {
            (ParamGroup::Lite, ParamGroup::Lite)
        } else {
            (ParamGroup::Weight, ParamGroup::Bias)
        };
        let fan_in = spec.in_per_group() * spec.kernel * spec.kernel;
        let w = self.param(format!("{name}.weight"), wg, spec.weight_shape().to_vec(), Init::He(fan_in))?;
        let c = spec.out_ch;
        let bias = self.param(format!("{name}.bias"), bg, vec![c], Init::Const(0.0))?;
        let slice = |id| ParamSlice { id, len: c };
        let norm = if group_norm {
            let g = self.param(format!("{name}.norm.gamma"), ParamGroup::Lite, vec![c], Init::Const(last_scale))?;
            let b = self.param(format!("{name}.norm.beta"), ParamGroup::Lite, vec![c], Init::Const(0.0))?;
            NormUnit::Group {
                gamma: slice(g),
                beta: slice(b),
            }
        } else {
            let g = self.param(format!("{name}.norm.gamma"), ParamGroup::NormScale, vec![c], Init::Const(1.0))?;
            let b = self.param(format!("{name}.norm.beta"), ParamGroup::NormShift, vec![c], Init::Const(0.0))?;
            let m = self.param(format!("{name}.norm.mean"), ParamGroup::Statistic, vec![c], Init::Const(0.0))?;
            let v = self.param(format!("{name}.norm.var"), ParamGroup::Statistic, vec![c], Init::Const(1.0))?;
            NormUnit::Frozen([slice(g), slice(b), slice(m), slice(v)])
        };
        Ok(ConvUnit {
            name: name.to_string(),
            spec,
            weight: WeightView::dense(w, &spec),
            bias: slice(bias),
            norm,
        })
    }
}

impl Builder<'_> {
    fn block(&mut self, name: &str, spec: &MbBlockSpec, last_scale: f32) -> Result<MbBlock> {
        let e = spec.expanded();
        let expand = self.unit(&format!("{name}.expand"), ConvSpec::new(spec.in_ch, e, 1, 1, 1), false, 1.0)?;
        let depthwise = self.unit(
            &format!("{name}.depthwise"),
            ConvSpec::new(e, e, spec.kernel, spec.stride, e),
            false,
            1.0,
        )?;
        let project = self.unit(&format!("{name}.project"), ConvSpec::new(e, spec.out_ch, 1, 1, 1), false, 1.0)?;
        let l = spec.lite;
        let c1 = ConvSpec::new(spec.in_ch, spec.in_ch, l.kernel, 1, l.groups);
        let c2 = ConvSpec::new(spec.in_ch, spec.out_ch, l.kernel, 1, l.groups);
        let lite = LiteBranch {
            name: format!("{name}.lite"),
            spec: l,
            conv1: self.unit(&format!("{name}.lite.conv1"), c1, true, 1.0)?,
            conv2: self.unit(&format!("{name}.lite.conv2"), c2, true, last_scale)?,
        };
        Ok(MbBlock {
            name: name.to_string(),
            spec: *spec,
            expand,
            depthwise,
            project,
            lite: Some(lite),
        })
    }
}

/// A standalone block with random parameters (lite scale 1).
pub fn build_block(spec: &MbBlockSpec, seed: u64) -> Result<(MbBlock, ParamStore<f32>)> {
    spec.validate("block")?;
    let mut b = Builder {
        store: ParamStore::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        source: None,
    };
    let block = b.block("block", spec, 1.0)?;
    Ok((block, b.store))
}

#[derive(Clone, Copy)]
enum Init {
    He(usize),
    Const(f32),
}

/// Builds the model described by `arch` with parameters drawn
/// deterministically from `seed`.
pub fn build_backbone(arch: &ArchitectureSpec, init: &InitStrategy, seed: u64) -> Result<(Model, ParamStore<f32>)> {
    arch.validate()?;
    let (source, last_scale) = match init {
        InitStrategy::PretrainedCopy(s) => (Some(s), 1.0),
        InitStrategy::RandomZeroScale => (None, 0.0),
    };
    let mut b = Builder {
        store: ParamStore::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        source,
    };
    let s = arch.stem;
    let stem = b.unit("stem", ConvSpec::new(INPUT_CHANNELS, s.out_ch, s.kernel, s.stride, 1), false, 1.0)?;
    let mut blocks = Vec::new();
    for (si, stage) in arch.stages.iter().enumerate() {
        for (bi, spec) in stage.blocks.iter().enumerate() {
            blocks.push(b.block(&format!("s{si}.b{bi}"), spec, last_scale)?);
        }
    }
    let d = arch.feature_channels();
    let k = arch.head.n_classes;
    let head = Head {
        weight: b.param("head.weight".into(), ParamGroup::Head, vec![d, k], Init::He(d))?,
        bias: b.param("head.bias".into(), ParamGroup::Head, vec![k], Init::Const(0.0))?,
    };
    let model = Model {
        arch: arch.clone(),
        stem,
        blocks,
        head,
    };
    Ok((model, b.store))
}

/// Closed-form parameter count (statistics excluded) of the network built
/// from `arch`.
pub fn closed_form_param_count(arch: &ArchitectureSpec) -> usize {
    let unit = |cin: usize, cout: usize, k: usize, groups: usize| cout * (cin / groups) * k * k + cout + 2 * cout;
    let mut n = unit(INPUT_CHANNELS, arch.stem.out_ch, arch.stem.kernel, 1);
    for b in arch.blocks() {
        let e = b.expanded();
        n += unit(b.in_ch, e, 1, 1) + unit(e, e, b.kernel, e) + unit(e, b.out_ch, 1, 1);
        n += unit(b.in_ch, b.in_ch, b.lite.kernel, b.lite.groups);
        n += unit(b.in_ch, b.out_ch, b.lite.kernel, b.lite.groups);
    }
    n + arch.feature_channels() * arch.head.n_classes + arch.head.n_classes
}
