use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation expects.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input data rejected (non-finite values, empty buffers).
    #[error("invalid input: {0}")]
    Input(String),

    /// A parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An operation would exceed a configured resource cap.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// A file does not follow its binary or text layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    /// Training diverged.
    #[error("non-finite loss at batch {batch} (max |grad| = {max_grad:e})")]
    NonFinite { batch: usize, max_grad: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
