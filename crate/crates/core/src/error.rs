use thiserror::Error;

/// Errors raised by the simulation and verification routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("path diverged at t = {time}")]
    Diverged { time: f64 },
    #[error("step size {dt} too large for implicit solve (need dt < {limit})")]
    StepSize { dt: f64, limit: f64 },
    #[error("implicit solver did not converge after {iterations} iterations (residual {residual:e})")]
    Solver { iterations: usize, residual: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("surface degenerated at step {step}: {detail}")]
    SurfaceDegenerate { step: usize, detail: String },
    #[error("sampler failure: {0}")]
    Sampler(String),
    #[error("not implemented for this family: {0}")]
    Unsupported(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("improper posterior: {0}")]
    ImproperPosterior(String),
    #[error("timeout: {0}")]
    Timeout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
