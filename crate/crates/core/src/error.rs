use thiserror::Error;

/// Errors produced by the numerical kernels, training machinery and report I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty set: {0}")]
    EmptySet(&'static str),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("training diverged at step {step}: {reason}")]
    TrainingDivergence { step: u64, reason: String },

    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("missing cell: algorithm `{algorithm}` has no entry for setup `{setup}`")]
    MissingCell { algorithm: String, setup: String },

    #[error("cannot merge result tables: {0}")]
    Merge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
