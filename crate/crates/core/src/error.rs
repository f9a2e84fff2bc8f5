use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("ill-conditioned ensemble: {0}")]
    IllConditioned(String),

    #[error("indeterminate phase: objective spread {spread:e} below threshold {threshold:e}")]
    IndeterminatePhase { spread: f64, threshold: f64 },

    #[error("no grid candidate inside [{lo:e}, {hi:e}]")]
    EmptyRange { lo: f64, hi: f64 },

    #[error("degenerate auxiliary vector {0}: norm below 1e-6")]
    Degenerate(&'static str),

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing measurement campaign `{0}`")]
    MissingCampaign(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
