use thiserror::Error;

use dds_autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum DdsError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric fault: {0}")]
    Numeric(String),
    #[error("environment: {0}")]
    Env(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DdsError {
    /// Process exit code: 2 config, 3 data, 4 numeric fault, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            DdsError::Config(_) => 2,
            DdsError::Data(_) | DdsError::Io(_) | DdsError::Json(_) | DdsError::Csv(_) => 3,
            DdsError::Numeric(_) => 4,
            DdsError::Autodiff(AutodiffError::NonFinite { .. }) => 4,
            DdsError::Autodiff(AutodiffError::Checkpoint(_)) => 3,
            DdsError::Autodiff(_) | DdsError::Env(_) => 1,
        }
    }
}

pub type Result<T, E = DdsError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> DdsError {
    DdsError::Config(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> DdsError {
    DdsError::Data(msg.into())
}
