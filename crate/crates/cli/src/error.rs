use std::path::PathBuf;

use docalign_core::Error as CoreError;
use docalign_net::NetError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Numerical(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Net(#[from] NetError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for invalid invocations or inputs of the wrong shape, 3 for
    /// filesystem, codec and parse failures, 4 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Json(_) => EXIT_IO,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Core(e) => core_code(e),
            CliError::Net(e) => match e {
                NetError::Core(e) => core_code(e),
                NetError::Shape(_) | NetError::InvalidArgument(_) => EXIT_USAGE,
                NetError::Numerical(_) => EXIT_NUMERICAL,
                NetError::Format { .. } | NetError::Io { .. } | NetError::Csv(_) | NetError::Json(_) => EXIT_IO,
            },
        }
    }
}

fn core_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Shape(_) | CoreError::InvalidArgument(_) => EXIT_USAGE,
        CoreError::NonFinite(_) | CoreError::Numerical(_) | CoreError::NoDocument(_) => EXIT_NUMERICAL,
        CoreError::Parse { .. } | CoreError::Schema { .. } | CoreError::Io { .. } | CoreError::Codec { .. } | CoreError::Json(_) => {
            EXIT_IO
        }
    }
}
