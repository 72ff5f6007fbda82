use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("array data has {len} values but shape {shape:?} needs {expected}")]
    BadShape {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("log of non-positive value {0}")]
    LogDomain(f64),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("differentiation root must be scalar, got shape {0:?}")]
    RootNotScalar(Vec<usize>),

    #[error("node {0} does not exist on this tape")]
    UnknownNode(usize),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("stage {stage} out of range for a model with {stages} stages")]
    StageOutOfRange { stage: usize, stages: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("SGLD diverged at step {step}: {reason}")]
    SgldDiverged { step: usize, reason: String },

    #[error("invalid corruption severity {0} (expected 1..=5)")]
    Severity(usize),

    #[error("invalid domain: {0}")]
    Domain(String),

    #[error("IDX format error in {path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
