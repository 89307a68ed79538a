use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate sight line: endpoints coincide")]
    DegenerateLine,

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("covariance is not positive definite")]
    NotPositiveDefinite,

    #[error("point lies on the sight line; slack is unbounded")]
    OnSightLine,

    #[error("stale duals for obstacle {obstacle} at step {step}: {reason}")]
    StaleDuals {
        obstacle: usize,
        step: usize,
        reason: String,
    },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("no feasible first step, even with slacks")]
    InfeasibleStart,

    #[error("target mean coincides with the robot position")]
    DegenerateTarget,

    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("invariant violation at line {line}: {msg}")]
    InvariantViolation { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
