use thiserror::Error;

/// Failure modes of planning, filtering and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },

    /// The stress extremization at `step` is no longer a minimum: the
    /// sensitivity is beyond the admissible threshold for this problem.
    #[error("neurotic breakdown at step {step}: det(I + sigma*Cov*V) = {det:e}")]
    NeuroticBreakdown { step: usize, det: f64 },

    #[error("Q_uu not positive definite at step {step} after regularization up to {max_mu:e}")]
    NonConvexQ { step: usize, max_mu: f64 },

    #[error("stress filter breakdown at step {step}: {reason}")]
    FilterBreakdown { step: usize, reason: &'static str },

    #[error("covariance {name} is not symmetric positive semi-definite")]
    InvalidCovariance { name: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported plan file version {0}")]
    PlanVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
