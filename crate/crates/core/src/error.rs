use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("covariate vector has width {got}, expected {expected}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("first covariate must be the intercept 1.0, found {0}")]
    MissingIntercept(f64),

    #[error("dataset has no observations")]
    EmptyDataset,

    #[error("group count must be at least 1 ({axis} {index} has count 0)")]
    ZeroCount { axis: &'static str, index: usize },

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("duplicate cell ({row}, {col}) on line {line}")]
    DuplicateCell { row: String, col: String, line: u64 },

    #[error("moment system is singular (degenerate observation pattern)")]
    SingularMomentSystem,

    #[error("design is singular: pivot {pivot:e} below floor {floor:e}")]
    SingularDesign { pivot: f64, floor: f64 },

    #[error("covariance matrix is not positive definite")]
    SingularCovariance,

    #[error("instance too large for dense computation: N = {n} exceeds {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
