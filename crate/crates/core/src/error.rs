//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward already consumed this tape; re-record the forward pass")]
    DoubleBackward,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("ratio {value} outside [0, 1]")]
    RatioOutOfRange { value: f64 },

    #[error("unknown schedule kind {0:?}")]
    UnknownSchedule(String),

    #[error("loss mask has no masked positions")]
    EmptyMask,

    #[error("class id {class_id} out of range for {num_classes} classes")]
    ClassOutOfRange { class_id: usize, num_classes: usize },

    #[error("sequence length {got} does not match model configuration {expected}")]
    SeqLenMismatch { got: usize, expected: usize },

    #[error("token id {id} out of vocabulary range {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("{0}")]
    InvalidDistribution(String),

    #[error("k-means needs at least {k} patches, got {got}")]
    TooFewPatches { k: usize, got: usize },

    #[error("image extents {h}x{w} not divisible by patch size {patch}")]
    NonDivisibleExtents { h: usize, w: usize, patch: usize },

    #[error("grid has masked positions; full decode requires all tokens known")]
    MaskedPositions,

    #[error("edit region is empty")]
    EmptyRegion,

    #[error("training aborted at step {step}: non-finite loss ({detail})")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {got} unsupported (expected {expected})")]
    CheckpointVersion { got: u32, expected: u32 },

    #[error("checkpoint is missing {0}")]
    CheckpointMissing(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("report parse error: {0}")]
    ReportParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}
