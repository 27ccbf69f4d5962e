//! Two-stage domain-adapted training for blind super-resolution and
//! deblurring, at a scale that runs on a CPU in minutes.
//!
//! The crate provides:
//!
//! - a dense rank-4 tensor core with reverse-mode autodiff
//!   ([`tensor`]), generic over the scalar type (`f32` for training,
//!   `f64` for gradient-check shadows);
//! - degradation synthesis — antialiased bicubic resampling, Gaussian
//!   blur, calibrated additive noise ([`degradation`]);
//! - PSNR/SSIM distortion metrics ([`metrics`]);
//! - miniature RCAN/EDSR model builders ([`models`]);
//! - a deterministic training loop with ADAM, a step-halving LR
//!   schedule, and bit-exact checkpointing ([`trainer`]);
//! - image ingestion and a procedural synthetic corpus ([`datasets`]);
//! - the experiment pipeline that trains and evaluates every mapping
//!   branch for x4 SR and the blur-mapping restoration study
//!   ([`pipeline`]).

pub mod datasets;
pub mod degradation;
pub mod error;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training/inference tensor type.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision shadow tensor type used by gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
