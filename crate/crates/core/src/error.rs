use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix has a negative eigenvalue {0:e} beyond tolerance")]
    NegativeEigenvalue(f64),

    #[error("index vectors are not orthonormal (deviation {0:e})")]
    NotOrthonormal(f64),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("unbounded hypothesis set: {0}")]
    Unbounded(String),

    #[error("infeasible fiber: best feasibility residual {residual:e}")]
    Infeasible { residual: f64 },

    #[error("rank-deficient matrix: smallest singular value {0:e}")]
    RankDeficient(f64),

    #[error("non-finite data in {0}")]
    NonFinite(&'static str),

    #[error("objective increased at iteration {iter}: {before:e} -> {after:e}")]
    DescentViolation { iter: usize, before: f64, after: f64 },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn param(message: impl Into<String>) -> Self {
        Error::InvalidParameter(message.into())
    }

    pub(crate) fn dims(message: impl Into<String>) -> Self {
        Error::DimensionMismatch(message.into())
    }
}
