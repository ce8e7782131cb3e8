//! Convolutional state space models.
//!
//! Diagonal HiPPO-initialized dynamics are discretized with a zero-order
//! hold, reshaped into convolution kernels, and run over spatiotemporal
//! sequences with an associative parallel scan. The crate also carries the
//! equivalence checks tying convolutional recurrences to per-pixel SSMs,
//! hand-written reverse-mode gradients, a synthetic bouncing-blob task and
//! the benchmark/training harness behind the `convssm` binary.

pub mod container;
pub mod data;
pub mod grad;
pub mod harness;
pub mod layer;
pub mod model;
pub mod nn;
pub mod equivalence;
pub mod error;
pub mod numlin;
pub mod scalar;
pub mod scan;
pub mod ssm_init;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Real, Scalar};
pub use tensor::{ConvKernel, Tensor};
