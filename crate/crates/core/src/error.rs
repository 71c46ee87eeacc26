use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AmdError>;

#[derive(Debug, Error)]
pub enum AmdError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected \"AMDT\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported format version {found}")]
    BadVersion { path: PathBuf, found: u16 },

    #[error("{path}: unknown axis label code {code}")]
    BadAxisLabel { path: PathBuf, code: u8 },

    #[error("{path}: truncated file, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: {actual} bytes on disk but header describes {expected}")]
    TrailingBytes {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite value at flat offset {offset}")]
    NonFinite { offset: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown material {0:?}")]
    UnknownMaterial(String),

    #[error("background mask is empty: {0}")]
    EmptyMask(String),

    #[error("degenerate cluster {cluster}: weight {weight:.3e} below 1/N")]
    DegenerateCluster { cluster: usize, weight: f64 },

    #[error("objective increased from {previous:.6e} to {current:.6e} at iteration {iteration}")]
    Divergence {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("CSV error on {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<AmdError>,
    },
}

impl AmdError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AmdError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        AmdError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AmdError::InvalidArgument(msg.into())
    }
}
