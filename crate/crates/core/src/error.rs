use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinite value reached a place that requires finite input.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A metric is undefined for the given input (for example, one class only).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("synthetic data generation failed: {0}")]
    Generation(String),

    /// Malformed on-disk data. `line` is 1-based; 0 means the whole file.
    #[error("{}:{line}: {msg}", path.display())]
    Load { path: PathBuf, line: usize, msg: String },

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
