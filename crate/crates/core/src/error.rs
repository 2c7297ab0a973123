//! Pipeline-level error and process exit codes.

use thiserror::Error;

use crate::dataload::DataError;
use crate::masks::MaskError;
use crate::model::checkpoint::CheckpointError;
use crate::model::ModelError;
use crate::scaling::ScalingError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("non-finite {what} at step {step}: {detail}")]
    NonFinite {
        what: &'static str,
        step: usize,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 config error, 3 invariant failure, 4 numerical abort, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Model(ModelError::Config(_) | ModelError::Target(_)) => 2,
            Error::Data(DataError::Reference(_)) => 2,
            Error::NonFinite { .. } => 4,
            Error::Tensor(TensorError::NonFinite { .. }) => 4,
            Error::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => 4,
            Error::Mask(MaskError::NonFinite(_)) => 4,
            Error::Io { .. } | Error::Checkpoint(CheckpointError::Io { .. }) => 1,
            _ => 3,
        }
    }
}
