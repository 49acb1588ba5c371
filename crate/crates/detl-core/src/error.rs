//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward already ran on this tape; build a new forward pass first")]
    BackwardConsumed,

    #[error("trainable parameter {0} has no gradient; run backward first")]
    MissingGradient(String),

    #[error("unknown preset `{0}` (expected mini-alex, mini-vgg, or mini-res)")]
    UnknownPreset(String),

    #[error("block id {id} out of range (max block id is {max})")]
    UnknownBlock { id: usize, max: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f32 },

    #[error("class `{class}` has {count} samples, fewer than required {required}")]
    ClassTooSmall {
        class: String,
        count: usize,
        required: usize,
    },

    #[error("unknown sample id `{0}`")]
    UnknownSampleId(String),

    #[error("labels file line {line}: {message}")]
    LabelsFile { line: usize, message: String },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{path}: {message}")]
    FileFormat { path: String, message: String },

    #[error("cross-validation fold {fold} failed: {source}")]
    FoldFailed {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
