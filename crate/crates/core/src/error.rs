use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("increment blocks are not consecutive and aligned (block {index} has n = {n})")]
    NotConsecutive { index: usize, n: usize },

    #[error("zero pivot in tridiagonal elimination at row {row}")]
    ZeroPivot { row: usize },

    #[error("non-finite state at step {step}{}", .sample.map(|s| format!(" (sample {s})")).unwrap_or_default())]
    NonFinite { step: usize, sample: Option<u64> },

    #[error("noise stream exhausted after {provided} of {expected} blocks")]
    StreamExhausted { expected: usize, provided: usize },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error(
        "{aborted} of {samples} samples aborted on a Lipschitz problem (budget {budget_pct}%)"
    )]
    AbortBudget {
        aborted: u64,
        samples: u64,
        budget_pct: u32,
    },

    #[error("replay differs from the recorded output in: {}", .files.join(", "))]
    ReplayMismatch { files: Vec<String> },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::AbortBudget { .. } => 2,
            Error::Io { .. } => 3,
            _ => 1,
        }
    }
}
