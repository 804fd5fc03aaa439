use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("cannot fuse latents with mismatched spatial extents: {0}")]
    Fusion(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tensor format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupt tensor file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("numerical failure: non-finite gradient in parameter `{param}`")]
    NonFinite { param: String },

    #[error("sample has no land pixels")]
    ExcludedSample,

    #[error("I/O error on {path}: {source}")]
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

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
