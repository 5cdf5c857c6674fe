use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("missing eigendecomposition: {0}")]
    MissingEigen(&'static str),

    #[error("eigenbasis is {age} statistics updates old (limit {limit})")]
    StaleEigenbasis { age: u64, limit: u64 },

    #[error("dense size guard exceeded: {size} parameters (limit {limit})")]
    SizeGuard { size: usize, limit: usize },

    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("non-positive variance {value} at index {index}")]
    NonPositiveVariance { index: usize, value: f64 },

    #[error("singular factor: smallest eigenvalue {0}")]
    Singular(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
