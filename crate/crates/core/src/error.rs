use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("unknown primitive kind `{0}`")]
    UnknownOp(String),

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: tensor is not part of this computation record")]
    NotInRecord,

    #[error("non-finite value at component {index} ({context})")]
    NonFinite { index: usize, context: String },

    #[error("non-finite loss term `{term}`{}", batch.map(|b| format!(" in batch {b}")).unwrap_or_default())]
    NonFiniteLoss { term: &'static str, batch: Option<usize> },

    #[error("{field}: {msg}")]
    Validation { field: String, msg: String },

    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("{path}: {msg} (at byte offset {offset})")]
    Format { path: PathBuf, offset: u64, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }

    pub(crate) fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
