//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: label `{value}` is not binary (expected 0/1)")]
    NonBinaryLabel { row: usize, value: String },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("split fraction must be positive and fractions must sum to 1")]
    InvalidSplit,

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("state space has {states} states, exceeding the enumeration cap of {cap}")]
    EnumerationCap { states: u128, cap: u64 },

    #[error("non-finite parameters at iteration {iteration}")]
    NumericalAbort { iteration: usize },

    #[error("degenerate labels: test set is all-zero or all-one")]
    DegenerateLabels,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}: malformed file at line {line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
