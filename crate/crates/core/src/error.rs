use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("phantom generation failed: {0}")]
    GenerationFailure(String),

    #[error("ingest error in {path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error("degenerate roi: {0}")]
    DegenerateRoi(String),

    #[error("empty minibatch: {0}")]
    EmptyMinibatch(String),

    #[error("sensitivity undefined: {0}")]
    UndefinedSensitivity(String),

    #[error("non-finite loss in {component} at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        component: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("checkpoint/config mismatch: {0}")]
    Version(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            message: message.into(),
        }
    }
}
