use std::path::PathBuf;

use slrf_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("count mismatch in {what}: expected {expected}, found {found}")]
    CountMismatch { what: String, expected: usize, found: usize },
    #[error("malformed JSON in {path}: {source}")]
    MalformedJson { path: PathBuf, source: serde_json::Error },
    #[error("bad image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CoreError {
    /// True for failures caused by the computation rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CoreError::Numerical(_)
                | CoreError::Tensor(TensorError::NonFinite { .. })
                | CoreError::Tensor(TensorError::NonFiniteGradient(_))
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
