//! Differentiable tensor kernels and a small anchor-based detector built
//! from composite backbones, dilated context fusion and mask-aware attention.

pub mod ablation;
pub mod anchors;
pub mod autograd;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
mod gemm;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod par;
pub mod synth;
pub mod postprocess;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
