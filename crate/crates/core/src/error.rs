use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside the admissible range [{min}, {max}]")]
    Domain { t: f64, min: f64, max: f64 },

    #[error("singular conversion: |{what}| = {value:e} is below 1e-12")]
    Singular { what: &'static str, value: f64 },

    #[error("v-parameterization requires a variance-preserving schedule")]
    VpRequired,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("sigma_prev^2 - gamma^2 = {value:e} is negative beyond tolerance")]
    GammaOverflow { value: f64 },

    #[error("ill-conditioned posterior covariance (condition number {cond:e})")]
    IllConditioned { cond: f64 },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty convergence curve")]
    EmptyCurve,

    #[error("invalid convergence curve: {0}")]
    Curve(String),

    #[error("incompatible supervision: {0}")]
    Incompatible(String),

    #[error("training diverged at step {step}: loss {loss:e}")]
    Divergence { step: u64, loss: f64 },

    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
