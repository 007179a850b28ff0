use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A quantity was evaluated where it is undefined (zero divisor, time out of range).
    #[error("domain error: {0}")]
    Domain(String),

    /// A requested value lies outside what a monotone map can attain.
    #[error("range error: {what}; requested {requested}, attainable [{lo}, {hi}]")]
    Range {
        what: String,
        requested: String,
        lo: f64,
        hi: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The state left the finite region during a solve.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("step size underflow at t = {t}: h = {h:e}")]
    Stiffness { t: f64, h: f64 },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    /// Structural problem with coefficients or parameter vectors.
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("field does not support dual evaluation: {0}")]
    NotDifferentiable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by numerics rather than by inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::Stiffness { .. })
    }
}
