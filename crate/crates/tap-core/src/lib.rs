//! # tap-core
//!
//! A library for **kernelized cross-attention over unlabeled reference data** (the
//! "attention patch", TAP) together with the kernel-regression machinery that
//! explains it:
//!
//! - [`graph`] / [`tensor`]: a reverse-mode automatic-differentiation engine on a
//!   Wengert tape (dense row-major tensors, trailing-dimension broadcasting,
//!   hand-tuned matmul kernels in [`gemm`]).
//! - [`kernel`]: determinant-scaled Gaussian product kernels, their moment
//!   constants, bandwidth schedules, and kernel density estimation.
//! - [`nw`]: a Nadaraya–Watson regression laboratory that measures empirical
//!   bias/variance decay rates against the asymptotic predictions.
//! - [`tap`]: the attention patch itself — a cross-attention layer whose keys and
//!   values come from an unlabeled reference bank of a second modality.
//! - [`model`]: the five-variant model zoo used by the benchmark protocol.
//! - [`data`]: IDX/CSV loaders, split protocol, standardization, and the synthetic
//!   cross-modal corpus generator.
//! - [`train`]: the experiment runner — optimizer, training loop, majority-vote
//!   evaluation, Monte-Carlo repetition, and the reference-batch-size sweep.
//!
//! Everything numeric is generic over a floating-point [`scalar::Scalar`]; the
//! crate root exports concrete aliases for the two supported instantiations.

pub mod data;
pub mod error;
pub mod gemm;
pub mod graph;
pub mod kernel;
pub mod model;
pub mod nw;
pub mod scalar;
pub mod stats;
pub mod tap;
pub mod tensor;
pub mod train;

pub use error::{Result, TapError};
pub use scalar::Scalar;

/// Single-precision tensor (fast training).
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor (analysis-grade numerics).
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tape.
pub type Graph32 = graph::Graph<f32>;
/// Double-precision tape.
pub type Graph64 = graph::Graph<f64>;
