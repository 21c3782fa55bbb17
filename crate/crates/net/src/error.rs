use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Core(#[from] docalign_core::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl NetError {
    pub fn shape(msg: impl Into<String>) -> Self {
        NetError::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        NetError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NetError::Io { path: path.into(), source }
    }

    pub fn is_io(&self) -> bool {
        match self {
            NetError::Io { .. } | NetError::Csv(_) => true,
            NetError::Core(e) => e.is_io(),
            _ => false,
        }
    }

    pub fn is_numerical(&self) -> bool {
        match self {
            NetError::Numerical(_) => true,
            NetError::Core(e) => e.is_numerical(),
            _ => false,
        }
    }
}
