use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid action vector {0:?}: entries must be 0/1 with at most one set")]
    MalformedAction(Vec<f32>),
    #[error("the zero action is not a command here")]
    ZeroAction,
    #[error("unknown action {0:?} (expected forward, left or right)")]
    UnknownAction(String),
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("entity {entity} does not belong to the {domain} domain")]
    EntityDomainMismatch { entity: String, domain: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestep {t} outside schedule range 0..={max}")]
    TimestepRange { t: usize, max: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("stage {stage} cannot be trained on {found}")]
    StageMismatch { stage: u8, found: String },
    #[error("unsupported format version {found:?} (expected {expected:?})")]
    Version { expected: String, found: String },
    #[error("truncated data: {0}")]
    Truncated(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("non-finite loss at step {step}; diagnostic snapshot at {snapshot:?}")]
    NonFiniteLoss { step: u64, snapshot: Option<PathBuf> },
    #[error("session {0} already has a step in flight")]
    StepInFlight(String),
    #[error("{0}")]
    Evaluation(String),
    #[error("io error on {path:?}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed record: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
