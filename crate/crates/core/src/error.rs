use thiserror::Error;

/// Errors produced by the inference pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CilError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {block} at row {row}, column {col}")]
    NonFinite {
        block: &'static str,
        row: usize,
        col: usize,
    },

    #[error("cannot standardize constant control columns {0:?}")]
    ConstantColumns(Vec<usize>),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("enumeration over {size} inclusion indicators exceeds the limit of {limit}")]
    TooManyModels { size: usize, limit: usize },

    #[error("model set is empty")]
    EmptyModelSet,

    #[error("binomial family needs a 0/1 response, found {value} at row {row}")]
    NonBinaryResponse { row: usize, value: f64 },

    #[error("minimum-norm ridge features are only defined for continuous treatments; '{0}' is binary")]
    RidgeOnBinary(String),

    #[error("malformed input at line {line}: {message}")]
    Malformed { line: u64, message: String },

    #[error("unknown column '{0}'")]
    UnknownColumn(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, CilError>;
