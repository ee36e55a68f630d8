use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector {index} has norm {norm:e}, below the 1e-12 floor")]
    ZeroNormVector { index: usize, norm: f64 },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("view {candidate} is not in the positive set of anchor {anchor}")]
    NotAPositivePair { anchor: usize, candidate: usize },
    #[error("view {index} has no other member in its group")]
    EmptyPositiveSet { index: usize },
    #[error("view {index} has no view from a different group")]
    EmptyNegativeSet { index: usize },
    #[error("image is {width}x{height}, smaller than output size {output_size}")]
    ImageTooSmall { width: usize, height: usize, output_size: usize },
    #[error("augmentation count N = {0} is not allowed (use 0 or at least 2)")]
    InvalidN(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("activation cache does not belong to this forward pass: {0}")]
    StaleCache(String),
    #[error("epoch {epoch} outside schedule 0..={horizon}")]
    EpochOutOfRange { epoch: usize, horizon: usize },
    #[error("dataset has {available} images, batch needs {required}")]
    DatasetTooSmall { available: usize, required: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("k = {k} exceeds the {available} candidates per query")]
    KTooLarge { k: usize, available: usize },
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed image {path:?}: {reason}")]
    MalformedImage { path: Option<PathBuf>, reason: String },
    #[error("I/O failure on {path:?}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable variant name, used by the CLI when reporting failures.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ZeroNormVector { .. } => "ZeroNormVector",
            Error::InvalidTemperature(_) => "InvalidTemperature",
            Error::NotAPositivePair { .. } => "NotAPositivePair",
            Error::EmptyPositiveSet { .. } => "EmptyPositiveSet",
            Error::EmptyNegativeSet { .. } => "EmptyNegativeSet",
            Error::ImageTooSmall { .. } => "ImageTooSmall",
            Error::InvalidN(_) => "InvalidN",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::StaleCache(_) => "StaleCache",
            Error::EpochOutOfRange { .. } => "EpochOutOfRange",
            Error::DatasetTooSmall { .. } => "DatasetTooSmall",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::CorruptCheckpoint(_) => "CorruptCheckpoint",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::OutOfRange(_) => "OutOfRange",
            Error::KTooLarge { .. } => "KTooLarge",
            Error::LabelMismatch(_) => "LabelMismatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::MalformedImage { .. } => "MalformedImage",
            Error::IoFailure { .. } => "IoFailure",
            Error::Json(_) => "Json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure { path: path.into(), source }
    }
}
