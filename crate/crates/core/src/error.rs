use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for tensor of rank {rank} in {op}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sequence too long: {what} has length {len}, limit {limit}")]
    Overlength {
        what: &'static str,
        len: usize,
        limit: usize,
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } | Error::Axis { .. } => "dimension",
            Error::Contract(_) => "contract",
            Error::Degenerate(_) => "degenerate",
            Error::Overlength { .. } => "overlength",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::Parse { .. } => "parse",
            Error::VocabMismatch(_) => "vocab_mismatch",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
