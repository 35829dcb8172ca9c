use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    IoRaw(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    /// The input data cannot support the requested operation.
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("correlation undefined: {0} input is constant")]
    ConstantInput(&'static str),
    #[error("unsupported persisted version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("remote backend: {0}")]
    Remote(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the dataset rather than by configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::IoRaw(_) | Error::Json(_) | Error::Data(_) | Error::Version { .. }
        )
    }
}
