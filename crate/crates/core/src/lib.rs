//! Patch-wise, coordinate-conditioned denoising score matching.
//!
//! Training crops random patches of three sizes from each image, attaches the
//! patch's pixel coordinates as two extra input channels and minimizes the
//! preconditioned denoising loss on the patch. Sampling runs the probability
//! flow ODE over the full coordinate grid, or a larger grid for out-painting.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); training and
//! checkpoints use `f32`, gradient checks and the closed-form oracles use `f64`.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coords;
pub mod data_io;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod netgraph;
pub mod oracle;
pub mod patching;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use netgraph::{DenoiserParams, NetConfig};
pub use rng::{Purpose, RngKey};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Params32 = DenoiserParams<f32>;
pub type Params64 = DenoiserParams<f64>;
pub type CoordGrid32 = coords::CoordGrid<f32>;
pub type CoordGrid64 = coords::CoordGrid<f64>;
