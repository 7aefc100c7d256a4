use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("data integrity: {0}")]
    DataIntegrity(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("rank deficient design: {0}")]
    RankDeficient(String),

    #[error("degenerate stratum at m={step}: {msg}")]
    DegenerateStratum { step: usize, msg: String },

    #[error("estimation failed at step m={step}: {msg}")]
    Estimation { step: usize, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model state: {0}")]
    State(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Tags a learner or fitting failure with the recursion step it happened in.
    pub fn at_step(self, step: usize) -> Error {
        match self {
            e @ (Error::Estimation { .. } | Error::DegenerateStratum { .. }) => e,
            other => Error::Estimation {
                step,
                msg: other.to_string(),
            },
        }
    }
}
