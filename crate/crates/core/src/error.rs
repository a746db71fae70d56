use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("unsupported depth: {0}")]
    UnsupportedDepth(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no objects generated: {0}")]
    NoObjects(String),
    #[error("could only place {achieved} of {requested} {what}")]
    Placement {
        what: &'static str,
        requested: usize,
        achieved: usize,
    },
    #[error("empty class: {0}")]
    EmptyClass(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("image set mismatch: {0}")]
    ImageSetMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
