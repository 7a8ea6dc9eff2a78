//! Hessian-aware mixed-precision quantization toolkit.
//!
//! The pipeline: train a small model in full precision, probe each parameter
//! block's top Hessian eigenvalue with matrix-free power iteration, rank
//! blocks by the size-weighted sensitivity S_i = λ_i/n_i to assign bit
//! widths under a budget, rank by Ω_i = λ_i·||Q(W_i)-W_i||² to order the
//! block-wise quantization-aware fine-tuning stages, and report compression.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod hessian;
mod kernels;
pub mod landscape;
pub mod model;
pub mod oracle;
pub mod planner;
pub mod quant;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
