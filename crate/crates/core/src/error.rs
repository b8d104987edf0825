use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is numerically singular (reciprocal condition {rcond:.3e})")]
    Singular { rcond: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("interconnection is ill-posed: I - D2*M is singular")]
    IllPosed,

    #[error("storage matrix too ill-conditioned to extract a gain (reciprocal condition {rcond:.3e})")]
    Conditioning { rcond: f64 },

    #[error("data-consistent weighted degree is unbounded")]
    UnboundedDegree,

    #[error("interconnection data admits no consistent weighted degree")]
    InconsistentData,

    #[error("solver failure: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
