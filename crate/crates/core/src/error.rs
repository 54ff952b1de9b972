use thiserror::Error;

use crate::systems::RankReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e}, tolerance {tolerance:e})")]
    NotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("matrix is numerically singular (min eigenvalue {min_eigenvalue:e}, spectral norm {spectral_norm:e})")]
    Singular { min_eigenvalue: f64, spectral_norm: f64 },

    #[error("system is not controllable: {0}")]
    Uncontrollable(RankReport),

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate query: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },

    #[error("training diverged at iteration {iteration} (last loss {})", trace.last().copied().unwrap_or(f64::NAN))]
    Diverged { iteration: usize, trace: Vec<f64> },

    #[error("malformed data in {context}: {message}")]
    Malformed { context: String, message: String },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
