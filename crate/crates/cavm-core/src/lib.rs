//! Core library for staircase-masked autoregressive contrast-dose image
//! synthesis: a minimal tensor/autodiff substrate, transformer building
//! blocks, decomposition tokenizers and decoder, the dose autoregression,
//! synthetic phantom data, the two-phase training pipeline and region-split
//! image metrics.

pub mod autoreg;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod phantom;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
