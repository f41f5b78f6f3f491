use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{context}: matrix is not positive definite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite {
        context: &'static str,
        min_eigenvalue: f64,
    },

    #[error("{context}: matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveSemidefinite {
        context: &'static str,
        min_eigenvalue: f64,
    },

    #[error("{context}: numerically singular (min eigenvalue {min_eigenvalue:.3e}, condition number {condition:.3e})")]
    NumericallySingular {
        context: &'static str,
        min_eigenvalue: f64,
        condition: f64,
    },

    #[error("non-finite value encountered at step {step} in {context}")]
    NonFinite { context: &'static str, step: u64 },

    #[error("rank deficiency in {context}: rank {rank} < required {required}; deficient directions: {directions}")]
    RankDeficient {
        context: &'static str,
        rank: usize,
        required: usize,
        directions: String,
    },

    #[error("maximum iterations ({max_iter}) exceeded in {context}; last residual {residual:.3e}")]
    MaxIterations {
        context: &'static str,
        max_iter: usize,
        residual: f64,
    },

    #[error("dimension {dim} exceeds audit threshold {threshold} for {context}")]
    AuditThresholdExceeded {
        context: &'static str,
        dim: usize,
        threshold: usize,
    },

    #[error("ill-conditioned modal decomposition: condition estimate {condition:.3e} exceeds {limit:.3e}")]
    DefectiveOperator { condition: f64, limit: f64 },

    #[error("invalid argument for {context}: {message}")]
    InvalidArgument {
        context: &'static str,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dims(context: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn invalid(context: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            context,
            message: message.into(),
        }
    }
}
