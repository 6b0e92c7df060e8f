use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("location out of range: {0}")]
    Range(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("insufficient capacity: {0}")]
    Capacity(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("bandwidth error: {0}")]
    Bandwidth(String),
    #[error("class error: {0}")]
    Class(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
