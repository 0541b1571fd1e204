use thiserror::Error;

/// Errors raised by the estimation and testing routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("design matrix is rank deficient; dependent columns: {columns:?}")]
    RankDeficient { columns: Vec<usize> },
    #[error(
        "Gram matrix of the variance designs is singular (condition number {condition:.3e}); \
         remove collinear variance components"
    )]
    SingularGram { condition: f64 },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("model misspecified: {0}")]
    Misspecified(String),
    #[error("solver failed to converge: {0}")]
    NotConverged(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical routines, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::SingularGram { .. }
                | Error::Singular(_)
                | Error::Misspecified(_)
                | Error::NotConverged(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
