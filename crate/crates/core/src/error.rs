//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor is not attached to this tape (op {op})")]
    DetachedTensor { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("loss does not require gradients (detached or constant)")]
    DetachedLoss,

    #[error("backward has already run on this tape; build a fresh tape per step")]
    BackwardAlreadyRun,

    #[error("degenerate vector in {context}: norm {norm:e} is at or below the floor {floor:e}")]
    DegenerateVector {
        context: &'static str,
        norm: f64,
        floor: f64,
    },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("replay buffer holds {size} transitions, need {requested}")]
    UnderfullBuffer { size: usize, requested: usize },

    #[error("action {got} out of range for {space}")]
    ActionOutOfRange { got: String, space: String },

    #[error("episode already finished; reset the environment before stepping")]
    EpisodeFinished,

    #[error("invalid observation for state restore: {reason}")]
    BadObservation { reason: String },

    #[error("auxiliary-head loss requires a frozen initialization snapshot")]
    MissingFrozenSnapshot,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is truncated: expected {expected} bytes, found {found}")]
    CheckpointTruncated { expected: usize, found: usize },

    #[error("checkpoint checksum mismatch")]
    CheckpointChecksum,

    #[error("checkpoint entry {0} is missing")]
    CheckpointMissingEntry(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
