use thiserror::Error;

use crate::autodiff::{AutodiffError, CheckpointError};
use crate::sfc::SfcError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Sfc(#[from] SfcError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("empty point cloud")]
    EmptyPointCloud,
    #[error("inconsistent group layout: {0}")]
    Layout(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("training diverged at step {step}; last finite loss {last_finite_loss:?}")]
    Diverged { step: usize, last_finite_loss: Option<f64> },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl Error {
    /// Numerical failures as opposed to usage or input errors.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. } | Error::Autodiff(AutodiffError::NonFinite { .. })
        )
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
