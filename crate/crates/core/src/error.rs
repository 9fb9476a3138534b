use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: cannot parse {value:?} as {expected}")]
    Parse {
        row: usize,
        column: String,
        value: String,
        expected: &'static str,
    },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("column `{0}` has no non-missing values")]
    AllMissing(String),

    #[error("categorical column `{column}` has {levels} distinct levels (limit {limit})")]
    TooManyLevels {
        column: String,
        levels: usize,
        limit: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("need at least 2 distinct uncensored times to pick a bandwidth; supply one explicitly")]
    Bandwidth,

    #[error("cluster label {0} has no members")]
    EmptyClass(usize),

    #[error("{n} points cannot fill {k} clusters of at least {min_size}")]
    Infeasible { n: usize, k: usize, min_size: usize },

    #[error("metric undefined: {0}")]
    Undefined(&'static str),

    #[error("every restart failed: {0}")]
    AllRestartsFailed(String),
}
