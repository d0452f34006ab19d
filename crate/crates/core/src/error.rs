use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("layer {layer}: batch-norm running statistics are not initialised")]
    UninitializedStatistics { layer: usize },

    #[error("layer {layer}: non-finite value during {stage}")]
    NonFinite { layer: usize, stage: &'static str },

    #[error("numerical Jacobian is singular (log|det| = {log_abs_det})")]
    SingularJacobian { log_abs_det: f64 },

    #[error("factor `{factor}`: label {label} out of range (classes = {classes})")]
    LabelOutOfRange { factor: String, label: usize, classes: usize },

    #[error("unknown factor `{0}`")]
    UnknownFactor(String),

    #[error("class {class} of factor `{factor}` has no samples")]
    MissingClass { factor: String, class: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}, step {step}; parameters restored to the last good epoch")]
    Diverged { epoch: usize, step: u64 },

    #[error("rank-deficient loading matrix for factor `{0}`")]
    RankDeficient(String),

    #[error("zero-variance input")]
    ZeroVariance,

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: row {row}: label out of range in column `{factor}` ({label} >= {classes})")]
    FileLabelOutOfRange {
        path: PathBuf,
        row: usize,
        factor: String,
        label: usize,
        classes: usize,
    },

    #[error("{path}: row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: row {row}: cannot parse `{token}`")]
    Parse { path: PathBuf, row: usize, token: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
