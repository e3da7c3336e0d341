use std::io;

use thiserror::Error;

/// Failures of individual tensor operations and of gradient replay.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{0}: expected a scalar")]
    NotScalar(&'static str),
    #[error("gradient tape already consumed")]
    TapeConsumed,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("task {requested} is not visible yet (current task {current})")]
    TaskNotVisible { requested: usize, current: usize },
    #[error("training requires the current task {current}, got {requested}")]
    NotCurrentTask { requested: usize, current: usize },
    #[error("prune proportion {0} outside [0, 1]")]
    InvalidProportion(String),
    #[error("task position {position} outside 1..={total}")]
    InvalidTaskPosition { position: usize, total: usize },
    #[error("task {0} has not been trained since the last freeze")]
    FreezeWithoutTraining(usize),
    #[error("layer {layer} has no free weights left for task {task}")]
    CapacityExhausted { layer: usize, task: usize },
    #[error("task limit of {0} reached")]
    TooManyTasks(usize),
    #[error("training diverged on task {task} ({phase}, epoch {epoch}): non-finite loss")]
    Divergence {
        task: usize,
        phase: &'static str,
        epoch: usize,
    },
    #[error("model has tasks that are not frozen: {0}")]
    UnfrozenTasks(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
