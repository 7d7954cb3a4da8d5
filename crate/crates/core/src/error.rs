use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid hyperparameter or layer configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Misuse of the autodiff tape (non-scalar loss, double backward, ...).
    #[error("autodiff usage error: {0}")]
    Usage(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("decode error at byte {offset}: {msg}")]
    Decode { offset: u64, msg: String },

    #[error("archive format error: {0}")]
    Format(String),

    #[error("manifest {path:?} row {row}: {msg}")]
    Manifest { path: PathBuf, row: usize, msg: String },

    #[error("config {path}:{line}: {msg}")]
    ConfigParse { path: String, line: usize, msg: String },

    #[error("non-finite loss at step {step} (batch rows {rows:?})")]
    NonFinite { step: u64, rows: Vec<usize> },

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
