//! Desk-scale lab for denoising-style language model pretraining: a small
//! auxiliary model corrupts masked text, a main model learns to detect the
//! replacements, and everything around that loop (schedules, memory plans,
//! half-precision kernels, fine-tuning) is built to be measured.
//!
//! All training math is generic over [`scalar::Scalar`] so the same code
//! runs in f64 for gradient checking and f32 for training.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod finetune;
pub mod fused;
pub mod gradcheck;
pub mod half;
pub mod objectives;
pub mod error;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod zero;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Checking-precision tensor.
pub type Tensor64 = Tensor<f64>;
