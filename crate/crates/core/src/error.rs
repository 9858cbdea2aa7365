use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = WwtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WwtError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error in {what} at byte {offset}: {msg}")]
    Parse {
        what: String,
        offset: usize,
        msg: String,
    },

    #[error("dataset: {0}")]
    Data(String),

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl WwtError {
    /// Stable machine-readable class name, used by the CLI and the C ABI.
    pub fn class(&self) -> &'static str {
        match self {
            WwtError::Shape { .. } => "shape",
            WwtError::InvalidArgument { .. } => "invalid_argument",
            WwtError::NonFinite { .. } => "non_finite",
            WwtError::Backward(_) => "backward",
            WwtError::Config(_) => "config",
            WwtError::Checkpoint(_) => "checkpoint",
            WwtError::Parse { .. } => "parse",
            WwtError::Data(_) => "data",
            WwtError::Diverged { .. } => "diverged",
            WwtError::Io { .. } => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        WwtError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        WwtError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WwtError::Io {
            path: path.into(),
            source,
        }
    }
}
