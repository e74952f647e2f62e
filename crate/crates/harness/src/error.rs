use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] sparsehead_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("scene spec infeasible: {0}")]
    Infeasible(String),
    #[error("non-finite loss at step {step}; tensors dumped to {}", dump.display())]
    NonFinite { step: usize, dump: PathBuf },
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(format!($($arg)*))
    };
}
pub(crate) use invalid;
