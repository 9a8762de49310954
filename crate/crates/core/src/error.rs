use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    #[error("non-finite value {value} when evaluating particle {index}")]
    NonFiniteEvaluation { index: usize, value: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(
        "ensemble with {len} particles exceeds the exact transport limit of {max}; subsample first"
    )]
    Capacity { len: usize, max: usize },

    #[error("simulation diverged at step {step}, particle {particle}")]
    Divergence { step: usize, particle: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing flow data: {0}")]
    MissingData(String),

    #[error("projection infeasible at t={t}: {reason}")]
    ProjectionInfeasible { t: f64, reason: String },

    #[error("level set violated at t={t}: u(m)={before}, u(m')={after}")]
    LevelSet { t: f64, before: f64, after: f64 },

    #[error("diffusion {sigma} below ellipticity bound {min} at (t={t}, x={x})")]
    Ellipticity {
        sigma: f64,
        min: f64,
        t: f64,
        x: f64,
    },

    #[error("{fraction} of the mass lies outside the grid domain [{lo}, {hi}]")]
    DomainCoverage { fraction: f64, lo: f64, hi: f64 },

    #[error("dual maximum attained at the edge alpha={alpha} of the search interval; widen the range and retry")]
    SearchInterval { alpha: f64 },

    #[error("quadrature did not converge: achieved {achieved:e}, requested {requested:e}")]
    Accuracy { achieved: f64, requested: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
