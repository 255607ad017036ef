//! Reverse-mode tape whose save-for-backward decisions follow the trainable
//! parameter mask.
//!
//! A linear, convolution or normalization node keeps a 32-bit copy of its
//! input only when its weight (or scale) is trainable: the gradient of an
//! additive bias needs nothing but the upstream gradient. ReLU keeps a one-bit
//! sign mask; sigmoid and h-swish keep their full input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, ActKind, ConvGeometry, WeightView};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ValueId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StorageKind {
    Full32,
    BitMask,
    None,
}

/// Storage category of one saved buffer and its nominal size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageClass {
    pub kind: StorageKind,
    pub bytes: u64,
}

impl StorageClass {
    pub fn full32(numel: usize) -> Self {
        StorageClass {
            kind: StorageKind::Full32,
            bytes: 4 * numel as u64,
        }
    }

    pub fn bitmask(numel: usize) -> Self {
        StorageClass {
            kind: StorageKind::BitMask,
            bytes: numel.div_ceil(8) as u64,
        }
    }

    pub fn none() -> Self {
        StorageClass {
            kind: StorageKind::None,
            bytes: 0,
        }
    }
}

/// Packed one-bit-per-element mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    bits: Vec<u8>,
    len: usize,
}

impl BitMask {
    pub fn from_fn(len: usize, f: impl Fn(usize) -> bool) -> Self {
        let mut bits = vec![0u8; len.div_ceil(8)];
        for i in 0..len {
            if f(i) {
                bits[i >> 3] |= 1 << (i & 7);
            }
        }
        BitMask { bits, len }
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i >> 3] & (1 << (i & 7)) != 0
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn byte_len(&self) -> usize {
        self.bits.len()
    }
}

#[derive(Clone, Debug)]
pub enum SavedBuf<T> {
    Full(Tensor<T>),
    Mask(BitMask),
}

#[derive(Clone, Debug)]
pub struct Saved<T> {
    pub buf: SavedBuf<T>,
    pub class: StorageClass,
}

impl<T: Real> Saved<T> {
    pub fn full(t: Tensor<T>) -> Self {
        let class = StorageClass::full32(t.numel());
        Saved {
            buf: SavedBuf::Full(t),
            class,
        }
    }

    pub fn mask(m: BitMask) -> Self {
        let class = StorageClass::bitmask(m.len());
        Saved {
            buf: SavedBuf::Mask(m),
            class,
        }
    }
}

/// Trainability of an op's own parameters, fixed when the op is recorded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMask {
    pub weight_trainable: bool,
    pub bias_trainable: bool,
}

/// Leading-channel view of a per-channel parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamSlice {
    pub id: ParamId,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub enum OpKind {
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
    },
    Conv {
        geom: ConvGeometry,
        weight: WeightView,
        bias: Option<ParamSlice>,
        standardize: Option<f64>,
    },
    GroupNorm {
        gamma: ParamSlice,
        beta: ParamSlice,
        group_size: usize,
        eps: f64,
    },
    FrozenNorm {
        gamma: ParamSlice,
        beta: ParamSlice,
        mean: ParamSlice,
        var: ParamSlice,
        eps: f64,
    },
    Activation(ActKind),
    AvgPool2 {
        in_shape: [usize; 4],
    },
    Upsample {
        in_shape: [usize; 4],
    },
    Add,
    GlobalAvgPool {
        in_shape: [usize; 4],
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Linear { .. } => "linear",
            OpKind::Conv { .. } => "conv2d",
            OpKind::GroupNorm { .. } => "group_norm",
            OpKind::FrozenNorm { .. } => "frozen_norm",
            OpKind::Activation(ActKind::Relu) => "relu",
            OpKind::Activation(ActKind::Sigmoid) => "sigmoid",
            OpKind::Activation(ActKind::HSwish) => "h_swish",
            OpKind::AvgPool2 { .. } => "avg_pool2",
            OpKind::Upsample { .. } => "bilinear_upsample",
            OpKind::Add => "add",
            OpKind::GlobalAvgPool { .. } => "global_avg_pool",
        }
    }

    /// True for ops whose input copy is only needed for a weight gradient.
    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            OpKind::Linear { .. } | OpKind::Conv { .. } | OpKind::GroupNorm { .. } | OpKind::FrozenNorm { .. }
        )
    }
}

/// One recorded forward op.
#[derive(Clone, Debug)]
pub struct TapeNode<T> {
    pub op_id: usize,
    pub kind: OpKind,
    pub inputs: Vec<ValueId>,
    pub input_requires_grad: Vec<bool>,
    pub output: ValueId,
    pub out_shape: Vec<usize>,
    pub saved: Vec<Saved<T>>,
    pub mask: TrainMask,
    /// Trainable parameters this node produces gradients for.
    pub params: Vec<ParamId>,
}

impl<T> TapeNode<T> {
    pub fn saved_bytes(&self) -> u64 {
        self.saved.iter().map(|s| s.class.bytes).sum()
    }

    pub fn full32_bytes(&self) -> u64 {
        self.saved
            .iter()
            .filter(|s| s.class.kind == StorageKind::Full32)
            .map(|s| s.class.bytes)
            .sum()
    }
}

/// What gets kept for backward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SaveMode {
    /// Keep only what the trainable set needs.
    #[default]
    Selective,
    /// Reference mode: every op keeps a full copy of its input.
    SaveAll,
}

/// A value flowing through the forward pass.
#[derive(Clone, Debug)]
pub struct Var<T = f32> {
    pub id: ValueId,
    pub value: Tensor<T>,
    pub requires_grad: bool,
}

impl<T: Real> Var<T> {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<TapeNode<T>>,
    next_value: usize,
    mode: SaveMode,
    recording: bool,
    live_bytes: u64,
    peak_bytes: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A recording tape in selective-save mode.
    pub fn new() -> Self {
        Self::with_mode(SaveMode::Selective)
    }

    pub fn with_mode(mode: SaveMode) -> Self {
        Tape {
            nodes: Vec::new(),
            next_value: 0,
            mode,
            recording: true,
            live_bytes: 0,
            peak_bytes: 0,
        }
    }

    /// A tape that records nothing (inference).
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn mode(&self) -> SaveMode {
        self.mode
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn nodes(&self) -> &[TapeNode<T>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input that needs no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    /// Registers a leaf; with `requires_grad` its gradient is reported by
    /// [`backward_with_inputs`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        Var {
            id: self.fresh(),
            value,
            requires_grad: requires_grad && self.recording,
        }
    }

    fn fresh(&mut self) -> ValueId {
        let id = ValueId(self.next_value);
        self.next_value += 1;
        id
    }

    /// Bytes currently held by saved buffers.
    pub fn live_bytes(&self) -> u64 {
        self.live_bytes
    }

    /// Largest value of [`Tape::live_bytes`] seen so far.
    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    /// Whether an op with these inputs and trainable flags must be recorded.
    pub(crate) fn needs_node(&self, inputs: &[&Var<T>], any_param_trainable: bool) -> bool {
        self.recording && (any_param_trainable || inputs.iter().any(|v| v.requires_grad))
    }

    /// An untracked output.
    pub(crate) fn detached(&mut self, value: Tensor<T>) -> Var<T> {
        Var {
            id: self.fresh(),
            value,
            requires_grad: false,
        }
    }

    pub(crate) fn record(
        &mut self,
        kind: OpKind,
        inputs: &[&Var<T>],
        params: Vec<ParamId>,
        mask: TrainMask,
        saved: Vec<Saved<T>>,
        value: Tensor<T>,
    ) -> Var<T> {
        let output = self.fresh();
        let node = TapeNode {
            op_id: self.nodes.len(),
            kind,
            inputs: inputs.iter().map(|v| v.id).collect(),
            input_requires_grad: inputs.iter().map(|v| v.requires_grad).collect(),
            output,
            out_shape: value.shape().to_vec(),
            saved,
            mask,
            params,
        };
        self.live_bytes += node.saved_bytes();
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        self.nodes.push(node);
        Var {
            id: output,
            value,
            requires_grad: true,
        }
    }

    /// Sum of saved-buffer bytes over all recorded nodes.
    pub fn saved_bytes(&self) -> u64 {
        self.nodes.iter().map(|n| n.saved_bytes()).sum()
    }

    /// Trainable parameters referenced by recorded nodes.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.nodes.iter().flat_map(|n| n.params.iter().copied()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Appends another tape's nodes (their value ids are renumbered).
    pub fn append(&mut self, other: Tape<T>) {
        let offset = self.next_value;
        for mut node in other.nodes {
            node.op_id = self.nodes.len();
            node.output = ValueId(node.output.0 + offset);
            for id in &mut node.inputs {
                id.0 += offset;
            }
            self.live_bytes += node.saved_bytes();
            self.nodes.push(node);
        }
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        self.next_value += other.next_value;
    }
}

/// Gradients keyed by parameter id, holding exactly the trainable parameters
/// of a tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet<T = f32> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: Tensor<T>) -> Result<()> {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(id, g);
                Ok(())
            }
        }
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor<T>) {
        self.grads.insert(id, g);
    }
}

/// Reverse traversal from the final recorded output.
pub fn backward_pass<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, loss_grad: &Tensor<T>) -> Result<GradientSet<T>> {
    backward_with_inputs(tape, store, loss_grad).map(|(g, _)| g)
}

/// Like [`backward_pass`], also returning gradients reaching leaves created
/// with `requires_grad`.
pub fn backward_with_inputs<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    loss_grad: &Tensor<T>,
) -> Result<(GradientSet<T>, BTreeMap<ValueId, Tensor<T>>)> {
    let last = tape
        .nodes
        .last()
        .ok_or_else(|| Error::Structural("backward on an empty tape".into()))?;
    if last.out_shape != loss_grad.shape() {
        return Err(Error::Shape(format!(
            "loss gradient {:?} does not match output {:?}",
            loss_grad.shape(),
            last.out_shape
        )));
    }
    check_acyclic(&tape.nodes)?;

    let produced: std::collections::HashSet<ValueId> = tape.nodes.iter().map(|n| n.output).collect();
    let mut grads: BTreeMap<ValueId, Tensor<T>> = BTreeMap::new();
    grads.insert(last.output, loss_grad.clone());
    let mut out = GradientSet::default();
    let mut leaves = BTreeMap::new();

    for node in tape.nodes.iter_mut().rev() {
        let saved = std::mem::take(&mut node.saved);
        let freed: u64 = saved.iter().map(|s| s.class.bytes).sum();
        tape.live_bytes -= freed;
        let Some(g) = grads.remove(&node.output) else {
            for &p in &node.params {
                out.accumulate(p, Tensor::zeros(store.value(p).shape().to_vec()))?;
            }
            continue;
        };
        let step = layers::backward_node(node, saved, &g, store)?;
        for (p, pg) in step.params {
            out.accumulate(p, pg)?;
        }
        for ((&input, &needs), gi) in node.inputs.iter().zip(&node.input_requires_grad).zip(step.inputs) {
            if !needs {
                continue;
            }
            let gi = gi.ok_or_else(|| {
                Error::Structural(format!("{} produced no input gradient", node.kind.name()))
            })?;
            let target = if produced.contains(&input) {
                &mut grads
            } else {
                &mut leaves
            };
            match target.get_mut(&input) {
                Some(acc) => acc.add_assign(&gi)?,
                None => {
                    target.insert(input, gi);
                }
            }
        }
    }
    Ok((out, leaves))
}

fn check_acyclic<T>(nodes: &[TapeNode<T>]) -> Result<()> {
    // Values are numbered at creation, so a well-formed tape only consumes
    // values created before its own output.
    let mut seen_outputs = std::collections::HashSet::new();
    for n in nodes {
        if n.inputs.iter().any(|i| i.0 >= n.output.0) || !seen_outputs.insert(n.output) {
            return Err(Error::Structural(format!(
                "cycle or duplicate output at op {} ({})",
                n.op_id,
                n.kind.name()
            )));
        }
    }
    Ok(())
}

/// Total saved bytes of a tape.
pub fn saved_bytes<T: Real>(tape: &Tape<T>) -> u64 {
    tape.saved_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn storage_class_sizes() {
        assert_eq!(StorageClass::full32(1000).bytes, 4000);
        assert_eq!(StorageClass::bitmask(1000).bytes, 125);
        assert_eq!(StorageClass::bitmask(1001).bytes, 126);
        assert_eq!(StorageClass::none().bytes, 0);
    }

    #[test]
    fn bitmask_roundtrip() {
        let m = BitMask::from_fn(19, |i| i % 3 == 0);
        assert_eq!(m.byte_len(), 3);
        for i in 0..19 {
            assert_eq!(m.get(i), i % 3 == 0);
        }
    }

    #[test]
    fn empty_tape_backward_is_structural_error() {
        let mut tape = Tape::<f32>::new();
        let store = ParamStore::new();
        let err = backward_pass(&mut tape, &store, &Tensor::zeros(vec![1])).unwrap_err();
        assert!(matches!(err, Error::Structural(_)));
    }

    #[test]
    fn cycle_is_detected() {
        let node = TapeNode::<f32> {
            op_id: 0,
            kind: OpKind::Add,
            inputs: vec![ValueId(3), ValueId(0)],
            input_requires_grad: vec![true, true],
            output: ValueId(1),
            out_shape: vec![1],
            saved: vec![],
            mask: TrainMask::default(),
            params: vec![],
        };
        assert!(matches!(check_acyclic(&[node]), Err(Error::Structural(_))));
    }
}
