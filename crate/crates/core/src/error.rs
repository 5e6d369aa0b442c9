use thiserror::Error;

/// Errors raised by the numerical routines and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("operator is not positive semi-definite (min eigenvalue {min_eigenvalue:e} < -{tolerance:e})")]
    NotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("activation growth exponent r = {0} is not strictly below 2")]
    UnsupportedGrowth(f64),

    #[error("unstable log-MGF estimate: effective sample size {ess:.1} below floor {floor:.1}")]
    UnstableMgf { ess: f64, floor: f64 },

    #[error("insufficient hits: {0}")]
    InsufficientHits(String),

    #[error("training input {index} is not a grid node")]
    OffGrid { index: usize },

    #[error("operators live on different grids")]
    GridMismatch,

    #[error("internal error: {0}")]
    Internal(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
