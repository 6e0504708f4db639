//! Error types shared across the crate.

use thiserror::Error;

use crate::mmrm::MmrmFit;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violate a structural invariant (duplicate ids, bad schedule, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// A CSV row could not be parsed; `line` is 1-based and counts the header.
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: u64, msg: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// The fixed-effects design matrix is not full column rank.
    #[error("design matrix is rank deficient: column `{column}` is aliased")]
    RankDeficient { column: String },

    /// REML optimization hit the iteration cap. The last iterate is carried so
    /// callers can inspect how far the fit got.
    #[error("REML did not converge after {iterations} iterations (last restricted log-likelihood {last_loglik})")]
    NonConvergence {
        iterations: usize,
        last_loglik: f64,
        last_fit: Box<MmrmFit>,
    },

    /// The within-subject covariance cannot be estimated as positive definite.
    #[error("singular fit: {0}")]
    SingularFit(String),

    /// A numerical operation failed (factorization, ill-conditioning, ...).
    #[error("numerical failure in {stage}: {msg}")]
    Numerical { stage: String, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn numerical(stage: &str, msg: impl Into<String>) -> Self {
        Error::Numerical {
            stage: stage.to_string(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: input problems and numerical problems
    /// are distinguishable by code.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Validation(_) | Error::Csv { .. } | Error::Config(_) => 2,
            Error::RankDeficient { .. }
            | Error::NonConvergence { .. }
            | Error::SingularFit(_)
            | Error::Numerical { .. } => 3,
            Error::Io(_) | Error::Json(_) => 4,
        }
    }
}
