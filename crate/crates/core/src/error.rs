use thiserror::Error;

/// Errors produced by tensor primitives, gate algebra, training, and file I/O.
#[derive(Debug, Error)]
pub enum DgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("step {step} exceeds total steps {total}")]
    Range { step: usize, total: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DgError>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::DgError::Dimension(format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::DgError::Config(format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use dim_err;
