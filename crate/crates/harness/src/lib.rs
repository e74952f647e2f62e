//! Synthetic-scene training, efficiency benchmarks and the command line for
//! the sparse detection head in `sparsehead-core`.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod flops;
pub mod gradsuite;
pub mod latency;
pub mod scene;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
