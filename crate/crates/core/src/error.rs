use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("division by zero at element {index}")]
    DivisionByZero { index: usize },
    #[error("kernel size {0} must be odd and positive")]
    EvenKernel(usize),
    #[error("stride must be positive")]
    NonPositiveStride,
    #[error("batch statistics need at least two values per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("every mask entry of row {row} is zero and epsilon is disabled")]
    AllMaskedWithoutEpsilon { row: usize },
    #[error("backward() needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward(); run a fresh forward pass")]
    StaleTape,
    #[error("function is not deterministic: two evaluations differ by {0:e}")]
    NonDeterministicFunction(f64),

    #[error("span list is empty")]
    EmptySpanList,
    #[error("mask extent {0} must be odd")]
    EvenExtent(usize),
    #[error("extent {extent} is smaller than the required {required}")]
    ExtentTooSmall { extent: usize, required: usize },
    #[error("extent {extent} exceeds embedding table length {table}")]
    ExtentExceedsTable { extent: usize, table: usize },
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    #[error("invalid channel plan: {0}")]
    InvalidChannelPlan(String),
    #[error("model has no adaptive attention layers")]
    NotAdaptiveModel,

    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: truncated record at byte offset {offset}")]
    TruncatedRecord { path: PathBuf, offset: u64 },
    #[error("label {label} out of range in record {record}")]
    LabelOutOfRange { record: usize, label: u8 },
    #[error("fraction {0} must lie in (0, 1]")]
    FractionOutOfRange(f64),

    #[error("epoch {epoch} outside [0, {epochs})")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no completed runs for {0}")]
    MissingRun(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
