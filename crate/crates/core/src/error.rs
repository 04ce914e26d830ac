//! Crate-wide error types.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose dimensions must agree did not.
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration value is outside its valid range.
    #[error("{op}: invalid configuration: {msg}")]
    Config { op: &'static str, msg: String },

    /// A forward-pass input contained NaN or infinity.
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    /// Backward produced a NaN or infinite gradient; names the offending op.
    #[error("backward: non-finite gradient flowing out of op '{op}'")]
    NonFiniteGradient { op: &'static str },

    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Config {
            op,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{file}: bad magic, expected {expected:?}, got {got:?}")]
    BadMagic {
        file: String,
        expected: [u8; 4],
        got: [u8; 4],
    },

    #[error("{file}: unsupported version {got} (expected {expected})")]
    BadVersion {
        file: String,
        expected: u32,
        got: u32,
    },

    #[error("{file}: count mismatch: manifest says {expected}, payload holds {got}")]
    CountMismatch {
        file: String,
        expected: usize,
        got: usize,
    },

    #[error("{file}: non-finite value at frame {index}")]
    NonFinite { file: String, index: usize },

    #[error("{file}: truncated payload")]
    Truncated { file: String },

    #[error("label {label} out of range for {num_classes} classes (frame {index})")]
    LabelOutOfRange {
        label: usize,
        num_classes: usize,
        index: usize,
    },

    #[error("class {class} has {have} frames, need at least {need} to form {need} clusters")]
    TooFewFrames {
        class: usize,
        have: usize,
        need: usize,
    },

    #[error("cluster {cluster} of class {class} is empty")]
    EmptyCluster { class: usize, cluster: usize },

    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{file}: bad magic, expected \"TVGC\"")]
    BadMagic { file: String },

    #[error("{file}: unsupported version {got} (expected {expected})")]
    BadVersion {
        file: String,
        expected: u32,
        got: u32,
    },

    #[error("{file}: truncated entry while reading '{context}'")]
    Truncated { file: String, context: String },

    #[error("missing tensor '{name}' in checkpoint")]
    MissingTensor { name: String },

    #[error("tensor '{name}': shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}
