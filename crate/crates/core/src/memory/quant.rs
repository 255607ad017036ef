use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Per-tensor affine 8-bit codes spanning `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantized {
    pub codes: Vec<u8>,
    pub shape: Vec<usize>,
    pub min: f32,
    pub max: f32,
}

const LEVELS: f64 = 255.0;

impl Quantized {
    pub fn scale(&self) -> f32 {
        ((self.max as f64 - self.min as f64) / LEVELS) as f32
    }

    /// The code that represents zero (clamped into range).
    pub fn zero_point(&self) -> u8 {
        if self.max == self.min {
            return 0;
        }
        let z = -(self.min as f64) * LEVELS / (self.max as f64 - self.min as f64);
        z.round().clamp(0.0, LEVELS) as u8
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let (lo, hi) = (self.min as f64, self.max as f64);
        let data = self
            .codes
            .iter()
            .map(|&q| {
                let q = q as f64;
                ((lo * (LEVELS - q) + hi * q) / LEVELS) as f32
            })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("shape preserved")
    }
}

/// Min/max scaling to 256 levels; a constant tensor is reproduced exactly.
pub fn quantize8(w: &Tensor<f32>) -> Result<Quantized> {
    if !w.all_finite() {
        return Err(Error::Numeric("cannot quantize non-finite weights".into()));
    }
    let min = w.data().iter().copied().fold(f32::INFINITY, f32::min);
    let max = w.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = max as f64 - min as f64;
    let codes = w
        .data()
        .iter()
        .map(|&v| {
            if span == 0.0 {
                0
            } else {
                ((v as f64 - min as f64) / span * LEVELS).round().clamp(0.0, LEVELS) as u8
            }
        })
        .collect();
    Ok(Quantized {
        codes,
        shape: w.shape().to_vec(),
        min,
        max,
    })
}

/// Replaces every frozen parameter with its 8-bit reconstruction. Stored
/// statistics are left alone.
pub fn quantize_frozen(store: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    let mut out = store.clone();
    for id in store.ids() {
        let p = store.param(id);
        if !p.trainable && !p.group.is_statistic() {
            *out.value_mut(id) = quantize8(&p.value)?.dequantize();
        }
    }
    Ok(out)
}
