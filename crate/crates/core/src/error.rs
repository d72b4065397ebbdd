use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied arguments violate a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data failed validation (malformed rows, inconsistent subjects, ...).
    #[error("data validation failed: {0}")]
    Validation(String),

    #[error("matrix is not positive definite ({context}; leading minor {minor} fails)")]
    NotPositiveDefinite { context: String, minor: usize },

    #[error("singular matrix in {context} (condition number {condition:.3e})")]
    Singular { context: String, condition: f64 },

    #[error("Newton-Raphson did not converge after {iterations} iterations (last change {last_change:.3e})")]
    NotConverged { iterations: usize, last_change: f64 },

    #[error("monotone likelihood: coefficient for covariate '{covariate}' diverges ({value:.2})")]
    Separation { covariate: String, value: f64 },

    #[error("time {requested} is beyond the supported range (limit {limit})")]
    Extrapolation { requested: f64, limit: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("marker {marker}: {source}")]
    Marker {
        marker: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("imputation {index}: {source}")]
    Imputation {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_marker(self, marker: u32) -> Error {
        Error::Marker {
            marker,
            source: Box::new(self),
        }
    }

    pub fn in_imputation(self, index: usize) -> Error {
        Error::Imputation {
            index,
            source: Box::new(self),
        }
    }

    /// True for failures caused by the input data rather than by numerics.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Validation(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => true,
            Error::Marker { source, .. } | Error::Imputation { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}
