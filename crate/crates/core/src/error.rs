use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset contains no sequences")]
    EmptyDataset,

    #[error("sequence {id}: {message}")]
    InvalidSequence { id: String, message: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("instance too large to enumerate ({paths} paths)")]
    TooLarge { paths: f64 },

    #[error("label sequence of length {label_len} needs at least {needed} frames, got {frames}")]
    Infeasible {
        label_len: usize,
        needed: usize,
        frames: usize,
    },

    #[error("{0}")]
    Missing(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        report: Box<crate::trainer::TrainReport>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
