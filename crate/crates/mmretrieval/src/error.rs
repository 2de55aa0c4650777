//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate product id {0}")]
    DuplicateId(u64),

    #[error("unknown product id {0}")]
    UnknownId(u64),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("empty query")]
    EmptyQuery,

    #[error("tokens not sorted: {0:?} precedes {1:?}")]
    UnsortedTokens(String, String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("filter parse error at column {col}: {msg}")]
    FilterParse { col: usize, msg: String },

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    #[error("training diverged at step {0}: non-finite loss")]
    Diverged(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
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

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
