//! Self-supervised cycle-consistent single-image super-resolution.
//!
//! Given one grayscale image, the library trains — at call time, from that
//! image alone — a pair of adversarial generators (multi-scale upscaler and a
//! noise-conditioned degrader) with twin patch discriminators, then emits the
//! x4 super-resolved image plus quality metrics. Everything runs on CPU; the
//! convolution kernels are data-parallel via rayon (feature `parallel`,
//! default on) with a bitwise-identical sequential fallback.

pub mod error;
pub mod models;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
