//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A class label or index is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// An invalid configuration value, reported with the offending key.
    #[error("config error: key `{key}`: {msg}")]
    Config { key: String, msg: String },

    /// A violation of the client/server exchange contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed IDX data file.
    #[error("idx parse error in {path}: {kind}")]
    Idx { path: PathBuf, kind: IdxError },

    /// I/O failure, always carrying the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// The distinct ways an IDX file can be malformed.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("truncated file: expected {expected} bytes after header, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("trailing data: expected {expected} bytes after header, found {found}")]
    TrailingData { expected: usize, found: usize },

    #[error("label {label} out of range [0, {num_classes})")]
    LabelOutOfRange { label: u8, num_classes: usize },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { key: key.into(), msg: msg.into() }
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 for config errors, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
