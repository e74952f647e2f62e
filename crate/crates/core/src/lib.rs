//! Mask-gated sparse convolution detection head.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`ops`], [`norm`], [`tape`], [`gradcheck`]: dense storage,
//!   convolution kernels, normalization statistics and reverse-mode
//!   differentiation.
//! - [`mask`]: Gumbel-thresholded spatial masks and the gather/scatter sparse
//!   3×3 convolution.
//! - [`cesc`]: one context-enhanced sparse convolution layer.
//! - [`objective`]: adaptive mask-ratio targets and the training losses.
//! - [`head`]: the multi-level, two-branch detection head.

pub mod cesc;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod ledger;
pub mod mask;
pub mod norm;
pub mod objective;
pub mod ops;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Dims, Tensor4};
