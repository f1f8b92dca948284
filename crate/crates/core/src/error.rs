use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the decomposition pipeline.
///
/// Variants are grouped by the process exit code they map to, so the CLI can
/// report configuration problems, bad data and numerical failures distinctly.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("malformed CSV rows at lines {lines:?}: {detail}")]
    MalformedRows { lines: Vec<usize>, detail: String },

    #[error("numerical: {0}")]
    Numerical(String),

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::MalformedRows { .. } | Error::Io { .. } => 3,
            Error::Dimension { .. } => 3,
            Error::Numerical(_) | Error::NonFinite { .. } => 4,
        }
    }

    /// Short machine-parsable category tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) | Error::MalformedRows { .. } | Error::Dimension { .. } => "data",
            Error::Io { .. } => "io",
            Error::Numerical(_) | Error::NonFinite { .. } => "numerical",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
