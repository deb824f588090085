//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask has no true pixels")]
    EmptyMask,
    #[error("no valid projected pixels")]
    EmptyProjection,
    #[error("episode too short: length {len} < window {window}")]
    EpisodeTooShort { len: usize, window: usize },
    #[error("actnorm already initialized")]
    AlreadyInitialized,
    #[error("actnorm not initialized")]
    UninitializedActnorm,
    #[error("mixing matrix is numerically singular")]
    SingularMixing,
    #[error("insufficient calibration data: have {have}, need {need}")]
    InsufficientCalibrationData { have: usize, need: usize },
    #[error("calibration windows must all be labeled normal")]
    MixedLabels,
    #[error("metric needs both classes present")]
    SingleClass,
    #[error("metric needs at least one positive")]
    NoPositives,
    #[error("training set contains anomalous windows")]
    AnomalousDataInTraining,
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether this error is a validation problem (bad inputs/config) as
    /// opposed to a runtime failure. The CLI maps validation to exit code 2
    /// and runtime failures to exit code 3.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Divergence { .. } | Error::Io(_) | Error::Json(_) | Error::SingularMixing
        )
    }
}
