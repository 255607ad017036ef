use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamSlice;
use crate::blocks::{Ctx, MbBlock, Model};
use crate::error::{shape_err, spec_err, Error, Result};
use crate::layers::{pooled_dim, ActKind, ConvSpec, WeightView, GN_CHANNELS_PER_GROUP};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

pub const MB: f64 = (1u64 << 20) as f64;

/// Layer categories with a save-for-backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Conv,
    /// Normalization with stored statistics.
    Norm,
    /// Normalization with per-sample statistics.
    GroupNorm,
    Relu,
    Sigmoid,
    HSwish,
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => LayerKind::Linear,
            "conv" => LayerKind::Conv,
            "norm" => LayerKind::Norm,
            "group_norm" => LayerKind::GroupNorm,
            "relu" => LayerKind::Relu,
            "sigmoid" => LayerKind::Sigmoid,
            "h_swish" => LayerKind::HSwish,
            other => return Err(spec_err!("unknown layer kind {other:?}")),
        })
    }
}

/// Bytes kept for backward by one recorded layer whose input holds
/// `batch·channels·h·w` elements.
///
/// Weighted layers and norms keep a 32-bit input copy only when their weight
/// (or scale) is trainable. A group norm also keeps it when a gradient has
/// to pass through to its input. ReLU keeps one bit per element; sigmoid and
/// h-swish keep their 32-bit input.
pub fn layer_activation_bytes(
    kind: LayerKind,
    weight_trainable: bool,
    input_requires_grad: bool,
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
) -> u64 {
    let numel = (batch * channels * h * w) as u64;
    match kind {
        LayerKind::Linear | LayerKind::Conv | LayerKind::Norm => {
            if weight_trainable {
                4 * numel
            } else {
                0
            }
        }
        LayerKind::GroupNorm => {
            if weight_trainable || input_requires_grad {
                4 * numel
            } else {
                0
            }
        }
        LayerKind::Relu => numel.div_ceil(8),
        LayerKind::Sigmoid | LayerKind::HSwish => 4 * numel,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: String,
    pub saved_activation_bytes: u64,
    pub frozen_param_bytes: u64,
    pub trainable_param_bytes: u64,
    pub optimizer_state_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryTotals {
    pub saved_activation_bytes: u64,
    pub frozen_param_bytes: u64,
    pub trainable_param_bytes: u64,
    pub optimizer_state_bytes: u64,
    /// Activations plus parameters; optimizer state is not included.
    pub headline_bytes: u64,
    pub headline_mb: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub rows: Vec<LayerRow>,
    pub totals: MemoryTotals,
}

impl MemoryReport {
    pub fn from_rows(rows: Vec<LayerRow>) -> Self {
        let mut t = MemoryTotals::default();
        for r in &rows {
            t.saved_activation_bytes += r.saved_activation_bytes;
            t.frozen_param_bytes += r.frozen_param_bytes;
            t.trainable_param_bytes += r.trainable_param_bytes;
            t.optimizer_state_bytes += r.optimizer_state_bytes;
        }
        t.headline_bytes = t.saved_activation_bytes + t.frozen_param_bytes + t.trainable_param_bytes;
        t.headline_mb = t.headline_bytes as f64 / MB;
        MemoryReport { rows, totals: t }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub inference_mac: u64,
    pub training_mac: u64,
    pub memory: MemoryReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacMode {
    Inference,
    /// Forward, input gradients wherever one is needed, and weight gradients
    /// for trainable weights under the store's current trainable set.
    Training,
}

/// Symbolic value: a shape and whether a gradient flows through it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sym {
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

/// Walks a model without computing anything, mirroring exactly what the
/// runtime tape records and saves.
pub struct Analyzer<'a, T: Real> {
    store: &'a ParamStore<T>,
    rows: Vec<LayerRow>,
    inference_mac: u64,
    training_mac: u64,
}

impl<'a, T: Real> Analyzer<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Analyzer {
            store,
            rows: Vec::new(),
            inference_mac: 0,
            training_mac: 0,
        }
    }

    pub fn report(self) -> CostReport {
        CostReport {
            inference_mac: self.inference_mac,
            training_mac: self.training_mac,
            memory: MemoryReport::from_rows(self.rows),
        }
    }

    fn trainable(&self, id: ParamId) -> bool {
        self.store.is_trainable(id)
    }

    fn params(&self, row: &mut LayerRow, parts: &[(ParamId, usize)]) {
        for &(id, n) in parts {
            let n = n as u64;
            if self.trainable(id) {
                row.trainable_param_bytes += 4 * n;
                row.optimizer_state_bytes += 8 * n;
            } else {
                row.frozen_param_bytes += n;
            }
        }
    }

    fn macs(&mut self, forward: u64, input_grad: bool, weight_grad: bool) {
        self.inference_mac += forward;
        self.training_mac += forward * (1 + input_grad as u64 + weight_grad as u64);
    }

    fn all_zero(&self, s: ParamSlice) -> bool {
        self.store.value(s.id).data()[..s.len].iter().all(|v| *v == T::zero())
    }

    fn norm(&mut self, name: &str, x: &Sym, kind: LayerKind, gamma: ParamSlice, beta: ParamSlice) -> Result<Sym> {
        let [n, c, h, w] = dims4(x)?;
        if gamma.len != c || beta.len != c {
            return Err(shape_err!("{name}: affine of {} for {c} channels", gamma.len));
        }
        let (gt, bt) = (self.trainable(gamma.id), self.trainable(beta.id));
        let mut row = LayerRow {
            layer: name.to_string(),
            ..Default::default()
        };
        self.params(&mut row, &[(gamma.id, c), (beta.id, c)]);
        let rg = if !gt && self.all_zero(gamma) {
            bt
        } else {
            let rec = x.requires_grad || gt || bt;
            if rec {
                row.saved_activation_bytes = layer_activation_bytes(kind, gt, x.requires_grad, n, c, h, w);
            }
            rec
        };
        self.rows.push(row);
        Ok(Sym {
            shape: x.shape.clone(),
            requires_grad: rg,
        })
    }

    fn passive(&mut self, x: &[&Sym], shape: Vec<usize>) -> Sym {
        Sym {
            shape,
            requires_grad: x.iter().any(|v| v.requires_grad),
        }
    }
}

fn dims4(x: &Sym) -> Result<[usize; 4]> {
    match x.shape[..] {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape_err!("expected a 4-d value, got {:?}", x.shape)),
    }
}

impl<T: Real> Ctx<T> for Analyzer<'_, T> {
    type V = Sym;

    fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn dims(&self, v: &Sym) -> Vec<usize> {
        v.shape.clone()
    }

    fn conv(&mut self, name: &str, x: &Sym, spec: &ConvSpec, weight: &WeightView, bias: ParamSlice, _: bool) -> Result<Sym> {
        weight.check(spec)?;
        let [n, c, h, w] = dims4(x)?;
        if c != spec.in_ch || bias.len != spec.out_ch {
            return Err(shape_err!("{name}: conv {}→{} on {c} channels", spec.in_ch, spec.out_ch));
        }
        let (wt, bt) = (self.trainable(weight.id), self.trainable(bias.id));
        let (oh, ow) = (spec.out_dim(h), spec.out_dim(w));
        let rec = x.requires_grad || wt || bt;
        let mut row = LayerRow {
            layer: name.to_string(),
            ..Default::default()
        };
        if rec {
            row.saved_activation_bytes = layer_activation_bytes(LayerKind::Conv, wt, x.requires_grad, n, c, h, w);
        }
        let wn = spec.weight_shape().iter().product();
        self.params(&mut row, &[(weight.id, wn), (bias.id, spec.out_ch)]);
        self.rows.push(row);
        let fwd = (n * spec.out_ch * oh * ow * spec.in_per_group() * spec.kernel * spec.kernel) as u64;
        self.macs(fwd, rec && x.requires_grad, wt);
        Ok(Sym {
            shape: vec![n, spec.out_ch, oh, ow],
            requires_grad: rec,
        })
    }

    fn group_norm(&mut self, name: &str, x: &Sym, gamma: ParamSlice, beta: ParamSlice) -> Result<Sym> {
        let c = dims4(x)?[1];
        if c % GN_CHANNELS_PER_GROUP != 0 {
            return Err(spec_err!("{name}: {c} channels not divisible into groups of {GN_CHANNELS_PER_GROUP}"));
        }
        self.norm(name, x, LayerKind::GroupNorm, gamma, beta)
    }

    fn frozen_norm(&mut self, name: &str, x: &Sym, [g, b, ..]: [ParamSlice; 4]) -> Result<Sym> {
        self.norm(name, x, LayerKind::Norm, g, b)
    }

    fn act(&mut self, name: &str, x: &Sym, kind: ActKind) -> Result<Sym> {
        let [n, c, h, w] = match x.shape[..] {
            [n, c] => [n, c, 1, 1],
            _ => dims4(x)?,
        };
        let lk = match kind {
            ActKind::Relu => LayerKind::Relu,
            ActKind::Sigmoid => LayerKind::Sigmoid,
            ActKind::HSwish => LayerKind::HSwish,
        };
        let mut row = LayerRow {
            layer: name.to_string(),
            ..Default::default()
        };
        if x.requires_grad {
            row.saved_activation_bytes = layer_activation_bytes(lk, false, true, n, c, h, w);
        }
        self.rows.push(row);
        Ok(x.clone())
    }

    fn pool(&mut self, _: &str, x: &Sym) -> Result<Sym> {
        let [n, c, h, w] = dims4(x)?;
        Ok(self.passive(&[x], vec![n, c, pooled_dim(h), pooled_dim(w)]))
    }

    fn upsample(&mut self, name: &str, x: &Sym, th: usize, tw: usize) -> Result<Sym> {
        let [n, c, h, w] = dims4(x)?;
        if th < h || tw < w {
            return Err(shape_err!("{name}: cannot upsample {h}×{w} to {th}×{tw}"));
        }
        self.macs((4 * n * c * th * tw) as u64, x.requires_grad, false);
        Ok(self.passive(&[x], vec![n, c, th, tw]))
    }

    fn add(&mut self, name: &str, a: &Sym, b: &Sym) -> Result<Sym> {
        if a.shape != b.shape {
            return Err(shape_err!("{name}: add {:?} vs {:?}", a.shape, b.shape));
        }
        Ok(self.passive(&[a, b], a.shape.clone()))
    }

    fn channel_constant(&mut self, _: &str, like: &Sym, _: ParamSlice) -> Result<Sym> {
        Ok(Sym {
            shape: like.shape.clone(),
            requires_grad: false,
        })
    }

    fn global_pool(&mut self, _: &str, x: &Sym) -> Result<Sym> {
        let [n, c, ..] = dims4(x)?;
        Ok(self.passive(&[x], vec![n, c]))
    }

    fn linear(&mut self, name: &str, x: &Sym, weight: ParamId, bias: ParamId) -> Result<Sym> {
        let [n, d_in] = x.shape[..] else {
            return Err(shape_err!("{name}: linear needs N×D input, got {:?}", x.shape));
        };
        let (w_in, d_out) = self.store.value(weight).dims2()?;
        if w_in != d_in {
            return Err(shape_err!("{name}: linear {w_in}→{d_out} on {d_in} features"));
        }
        let (wt, bt) = (self.trainable(weight), self.trainable(bias));
        let rec = x.requires_grad || wt || bt;
        let mut row = LayerRow {
            layer: name.to_string(),
            ..Default::default()
        };
        if rec {
            row.saved_activation_bytes = layer_activation_bytes(LayerKind::Linear, wt, x.requires_grad, n, d_in, 1, 1);
        }
        self.params(&mut row, &[(weight, d_in * d_out), (bias, d_out)]);
        self.rows.push(row);
        self.macs((n * d_in * d_out) as u64, rec && x.requires_grad, wt);
        Ok(Sym {
            shape: vec![n, d_out],
            requires_grad: rec,
        })
    }

    fn idle(&mut self, name: &str, params: &[(ParamId, usize)]) {
        let mut row = LayerRow {
            layer: name.to_string(),
            ..Default::default()
        };
        self.params(&mut row, params);
        self.rows.push(row);
    }
}

/// Memory and MAC cost of one training step at `batch`×3×`resolution`², under
/// the trainable set currently marked in `store`.
pub fn analyze<T: Real>(model: &Model, store: &ParamStore<T>, batch: usize, resolution: usize) -> Result<CostReport> {
    if batch == 0 || resolution == 0 {
        return Err(spec_err!("batch and resolution must be positive"));
    }
    let mut a = Analyzer::new(store);
    let x = Sym {
        shape: vec![batch, crate::blocks::INPUT_CHANNELS, resolution, resolution],
        requires_grad: false,
    };
    model.forward(&mut a, &x)?;
    Ok(a.report())
}

pub fn model_footprint<T: Real>(model: &Model, store: &ParamStore<T>, batch: usize, resolution: usize) -> Result<MemoryReport> {
    analyze(model, store, batch, resolution).map(|r| r.memory)
}

pub fn mac_count<T: Real>(model: &Model, store: &ParamStore<T>, mode: MacMode, batch: usize, resolution: usize) -> Result<u64> {
    let r = analyze(model, store, batch, resolution)?;
    Ok(match mode {
        MacMode::Inference => r.inference_mac,
        MacMode::Training => r.training_mac,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiteRatio {
    /// Inverted-bottleneck saved bytes (everything trainable) over lite-branch
    /// saved bytes (only the branch trainable).
    pub ratio: f64,
    /// Conv input channels of the bottleneck over those of the branch.
    pub channel_factor: f64,
    /// Spatial elements at block resolution over those after pooling.
    pub resolution_factor: f64,
}

/// Activation cost of a block's main path relative to its lite residual.
pub fn lite_overhead_ratio(block: &MbBlock, store: &ParamStore<f32>, batch: usize, h: usize, w: usize) -> Result<LiteRatio> {
    let lite = block
        .lite
        .as_ref()
        .ok_or_else(|| Error::Structural(format!("{} has no lite residual", block.name)))?;
    let x = Sym {
        shape: vec![batch, block.spec.in_ch, h, w],
        requires_grad: true,
    };
    let mut full = store.clone();
    for id in full.ids().collect::<Vec<_>>() {
        full.set_trainable(id, true);
    }
    let mut main_only = block.clone();
    main_only.lite = None;
    let mut a = Analyzer::new(&full);
    main_only.forward(&mut a, &x)?;
    let main_bytes = a.report().memory.totals.saved_activation_bytes;

    let mut branch = store.clone();
    for id in branch.ids().collect::<Vec<_>>() {
        branch.set_trainable(id, branch.param(id).group == crate::params::ParamGroup::Lite);
    }
    let mut a = Analyzer::new(&branch);
    block.forward(&mut a, &x)?;
    let lite_bytes: u64 = a
        .report()
        .memory
        .rows
        .iter()
        .filter(|r| r.layer.starts_with(&lite.name))
        .map(|r| r.saved_activation_bytes)
        .sum();
    let main_in: usize = [&block.expand, &block.depthwise, &block.project].iter().map(|u| u.spec.in_ch).sum();
    let lite_in = lite.conv1.spec.in_ch + lite.conv2.spec.in_ch;
    Ok(LiteRatio {
        ratio: main_bytes as f64 / lite_bytes as f64,
        channel_factor: main_in as f64 / lite_in as f64,
        resolution_factor: (h * w) as f64 / (pooled_dim(h) * pooled_dim(w)) as f64,
    })
}
