use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has (near-)zero norm")]
    ZeroRow(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("vector is not unit-normalized (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("label count {labels} does not match row count {rows}")]
    LabelMismatch { labels: usize, rows: usize },

    #[error("bad shape: {0}")]
    BadShape(String),

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("forward cache does not belong to these parameters")]
    StaleCache,

    #[error("batch of {batch} rows exceeds bank capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("temperature must be finite and > 0, got {0}")]
    BadTemperature(f64),

    #[error("anchor {0} has no negatives (no other group in batch and empty bank)")]
    EmptyNegativeSet(usize),

    #[error("neighbor table covers {table} samples but dataset has {dataset}")]
    TableMismatch { table: usize, dataset: usize },

    #[error("shape mismatch between parameters and {0}")]
    ShapeMismatch(&'static str),

    #[error("training set is empty")]
    EmptyTrainSet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported file format or version: {0}")]
    FormatVersion(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
