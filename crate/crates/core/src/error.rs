use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("line {line}: invalid or missing field `{field}`")]
    SchemaViolation { line: usize, field: String },

    #[error("manifest contains no records")]
    EmptyManifest,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot build a batch from zero records")]
    EmptyBatch,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask has no valid text slots")]
    NoValidPairs,

    #[error("similarity map sums to a non-positive value")]
    DegenerateMap,

    #[error("{records} records cannot fill a batch of {batch_size}")]
    InsufficientData { records: usize, batch_size: usize },

    #[error("non-finite loss at step {step} (batch records {records:?})")]
    NonFiniteLoss { step: u64, records: Vec<usize> },

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),

    #[error("prompt set has no templates or no classes")]
    EmptyPromptSet,

    #[error("no concept has both positive and negative labels")]
    NoScorableConcepts,

    #[error("incompatible model: {0}")]
    Incompatible(String),
}
