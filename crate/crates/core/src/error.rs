use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate {value} on axis {axis} is outside [0, {limit})")]
    OutOfRange {
        axis: char,
        value: f64,
        limit: usize,
    },

    #[error("schema mismatch: expected {expected} joints, got {actual}")]
    SchemaMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate depth {depth} at joint {joint} (must exceed {z_min})")]
    DegenerateDepth {
        joint: usize,
        depth: f64,
        z_min: f64,
    },

    #[error("batch of {0} is too small; pairwise losses need at least 2 samples")]
    InsufficientBatch(usize),

    #[error("pose file is missing required joint \"{0}\"")]
    MissingJoint(String),

    #[error("unknown schema version {found} (supported: {supported})")]
    UnknownSchemaVersion { found: u32, supported: u32 },

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("degenerate ground truth: all joints coincide, similarity alignment undefined")]
    DegenerateAlignment,

    #[error("topology hash mismatch: checkpoint {checkpoint}, expected {expected}")]
    TopologyMismatch {
        checkpoint: String,
        expected: String,
    },

    #[error("length mismatch: {left} predictions vs {right} ground truths")]
    LengthMismatch { left: usize, right: usize },

    #[error("training diverged at step {step}: non-finite loss ({breakdown})")]
    Diverged { step: u64, breakdown: String },

    #[error("detector failed on {failed} of {total} frames; aborting")]
    DetectorAborted { failed: usize, total: usize },

    #[error("cannot read video container {path}: {detail}")]
    UnreadableVideo { path: PathBuf, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    pub fn malformed(what: impl Into<String>, detail: impl std::fmt::Display) -> Self {
        Self::Malformed {
            what: what.into(),
            detail: detail.to_string(),
        }
    }
}
