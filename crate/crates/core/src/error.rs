use std::path::PathBuf;

use thiserror::Error;

use crate::flow::FlowReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("cannot parse {value:?} at row {row}, column {col} as a number")]
    Unparseable { row: usize, col: usize, value: String },

    #[error("column {col} ({name}) has no observed values")]
    FullyMissingColumn { col: usize, name: String },

    #[error("column {col} has fewer than two observed values")]
    TooFewObserved { col: usize },

    #[error("column {col} has zero variance over its observed values")]
    ZeroVariance { col: usize },

    #[error("entry ({row}, {col}) is masked")]
    MaskedRead { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bandwidth is zero: all sample rows are identical")]
    ZeroBandwidth,

    #[error("linear system is numerically singular (pivot {pivot:e} in column {col})")]
    Singular { col: usize, pivot: f64 },

    #[error("invalid missingness mechanism: {0}")]
    InvalidMechanism(String),

    #[error("missingness calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("flow aborted at step {step}: {reason}")]
    FlowAborted {
        step: usize,
        reason: String,
        report: Box<FlowReport>,
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
