use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0}")]
    Refused(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

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
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user input (bad flags, files, configs)
    /// rather than an internal failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Contract(_) | Error::NonFinite(_))
    }
}
