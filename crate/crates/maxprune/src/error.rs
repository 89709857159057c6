//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not line up (matmul operands, conv kernels, pool parity).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Network structure is inconsistent with the requested operation
    /// (missing maxout layer, stale caches, mismatched lineage).
    #[error("structure error: {0}")]
    Structure(String),

    /// Dataset-level problem (empty dataset, label out of range).
    #[error("data error: {0}")]
    Data(String),

    /// A file does not conform to its documented layout. `offset` is the byte
    /// position where validation failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// I/O failure, with the path that was being accessed.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
