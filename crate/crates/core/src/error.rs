use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} is invalid for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("encoder needs at least one visible patch")]
    EmptyVisible,

    #[error("visible/masked indices do not partition 0..{num_patches}")]
    NotAPartition { num_patches: usize },

    #[error("missing {0} context; run the lower stages first")]
    MissingContext(&'static str),

    #[error("{path}: record {record}: {reason}")]
    Format {
        path: PathBuf,
        record: usize,
        reason: String,
    },

    #[error("line {line}: {key}: {reason}")]
    Parse {
        line: usize,
        key: String,
        reason: String,
    },

    #[error("malformed {what}: {reason}")]
    Decode { what: &'static str, reason: String },

    #[error("non-finite {quantity} at step {step}")]
    NonFinite { step: u64, quantity: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
