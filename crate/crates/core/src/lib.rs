//! Desk-scale laboratory for low-bit quantization-aware training of a
//! micro LLaMA-style transformer: fake quantization with min-max / MSE
//! range calibration, knowledge-distillation QAT with configurable
//! freeze plans, and per-projection signal-propagation probes.

pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod probe;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
