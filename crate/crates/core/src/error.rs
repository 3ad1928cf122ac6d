use thiserror::Error;

/// Errors raised by the simulator, the control stack and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("CFL condition violated: dt*max(q1,q2) = {lhs:.6e} must not exceed dx = {dx:.6e}")]
    Cfl { lhs: f64, dx: f64 },

    #[error("non-finite value in state at step {step}")]
    NumericFault { step: usize },

    #[error("threshold denominator vanished for index {index}")]
    DegenerateThreshold { index: usize },

    #[error("kernel oracle did not converge after {sweeps} sweeps (last change {change:.3e})")]
    OracleDivergence { sweeps: usize, change: f64 },

    #[error("feasible parameter set became empty")]
    EmptyFeasibleSet,

    #[error("no controller context for parameter triple ({0}, {1}, {2})")]
    MissingContext(f64, f64, f64),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
