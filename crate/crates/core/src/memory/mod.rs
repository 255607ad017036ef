//! Analytic training-memory and MAC accounting, and 8-bit weight
//! quantization.

mod analyzer;
mod quant;

pub use analyzer::*;
pub use quant::{quantize8, quantize_frozen, Quantized};
