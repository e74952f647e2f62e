use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on shapes, lengths or argument ranges was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    /// An operation was called in the wrong execution mode (train vs. inference).
    #[error("mode violation: {0}")]
    Mode(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
