//! Soft-threshold ternary networks.
//!
//! During training every ternary kernel is carried as two latent float
//! kernels whose signs share one scale `alpha`; at export the two binary
//! kernels are summed into a single `{-1, 0, +1}` kernel with scale
//! `2 * alpha`, which the bit-packed inference kernels then execute with
//! mask/sign bitplanes and popcounts.

pub mod autograd;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
pub mod quant;
pub mod nn;
pub mod checkpoint;
pub mod train;
pub mod infer;
pub mod analysis;
