use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("matrix is not a proper rotation: {0}")]
    NotARotation(String),

    #[error("voxel size must be positive, got {0}")]
    InvalidVoxelSize(f64),

    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),

    #[error("insufficient points: need more than {needed}, have {available}")]
    InsufficientPoints { needed: usize, available: usize },

    #[error("pad target {target} is smaller than the {count} real points")]
    TargetTooSmall { target: usize, count: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("cloud has no real (unpadded) points")]
    EmptyCloud,

    #[error("cross-attention needs at least two clouds")]
    SingleCloud,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no correspondences within {0} m")]
    NoCorrespondences(f64),

    #[error("registration failed: fitness {fitness:.4} below floor {floor:.4}")]
    RegistrationFailed { fitness: f64, floor: f64 },

    #[error("pose graph is not connected: node {0} unreachable from node 0")]
    NotConnected(usize),

    #[error("trajectory of length {len} is shorter than the window {window}")]
    TooShort { len: usize, window: usize },

    #[error("report partitions differ: {0}")]
    PartitionMismatch(String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("window {requested} exceeds the trained window {trained}; retraining with the new window is required")]
    WindowTooLarge { requested: usize, trained: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::NotARotation(_) => "NotARotation",
            Error::InvalidVoxelSize(_) => "InvalidVoxelSize",
            Error::DegenerateCloud(_) => "DegenerateCloud",
            Error::InsufficientPoints { .. } => "InsufficientPoints",
            Error::TargetTooSmall { .. } => "TargetTooSmall",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonScalarLoss(_) => "NonScalarLoss",
            Error::UnknownParameter(_) => "UnknownParameter",
            Error::EmptyCloud => "EmptyCloud",
            Error::SingleCloud => "SingleCloud",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::NoCorrespondences(_) => "NoCorrespondences",
            Error::RegistrationFailed { .. } => "RegistrationFailed",
            Error::NotConnected(_) => "NotConnected",
            Error::TooShort { .. } => "TooShort",
            Error::PartitionMismatch(_) => "PartitionMismatch",
            Error::MalformedFile { .. } => "MalformedFile",
            Error::MalformedLine { .. } => "MalformedLine",
            Error::Checkpoint(_) => "Checkpoint",
            Error::WindowTooLarge { .. } => "WindowTooLarge",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
