use std::path::PathBuf;

use thiserror::Error;

use crate::param::ParamId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("target row {row} is not a valid one-hot vector")]
    InvalidTarget { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("every output gate is closed and no fallback was provided")]
    NoOutputPath,

    #[error("decision vector has {got} entries, architecture needs {expected}")]
    DecisionLength { expected: usize, got: usize },

    #[error("parameter {0} is missing")]
    MissingParam(ParamId),

    #[error("parameter {id}: shape {got:?} does not match expected {expected:?}")]
    ParamShape {
        id: ParamId,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{path}: row {row}, column {column}: {detail}")]
    Csv {
        path: PathBuf,
        row: usize,
        column: String,
        detail: String,
    },

    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("metrics file {path}: {detail}")]
    Metrics { path: PathBuf, detail: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
