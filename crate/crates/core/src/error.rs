use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by models, kernels, filters and the experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// An Euler step produced a non-finite state.
    #[error("non-finite state after Euler step {step}")]
    NonFinite { step: usize },

    /// Every weight vanished (or was NaN) at an observation step.
    #[error("degenerate weights at level {level}, step {step}")]
    DegenerateWeights { level: u32, step: usize },

    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Attach the level and step to a weight failure raised without them.
    pub(crate) fn at(self, level: u32, step: usize) -> Self {
        match self {
            Error::DegenerateWeights { .. } => Error::DegenerateWeights { level, step },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
