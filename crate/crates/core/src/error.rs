//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("{0}")]
    EmptyInput(&'static str),

    #[error("lattice misaligned: {0}")]
    LatticeMisaligned(String),

    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),

    #[error("more ground-truth segments ({segments}) than queries ({queries})")]
    TooManySegments { segments: usize, queries: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: {detail} (byte offset {offset})")]
    Format {
        path: PathBuf,
        detail: String,
        offset: u64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
