//! Error type shared by the model crates.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("dimension {0} is recurrent or unsupported; need 3 <= d <= 5")]
    BadDimension(usize),
    #[error("tube width p={p} exceeds length N={n}")]
    TubeTooWide { p: i64, n: i64 },
    #[error("site {0:?} is isolated (lambda_x = 0)")]
    IsolatedSite(String),
    #[error("site {0:?} is not part of the graph")]
    UnknownSite(String),
    #[error("start site must belong to the stopping domain")]
    StartOutsideDomain,
    #[error("kill radius {rho} too small: need rho > {min} for this set")]
    KillRadiusTooSmall { rho: f64, min: f64 },
    #[error("empty or singular solve domain")]
    EmptyDomain,
    #[error("linear solver did not reach tolerance {tol} in {max_iter} iterations (residual {residual})")]
    SolverStalled { tol: f64, max_iter: usize, residual: f64 },
    #[error("set is empty")]
    EmptySet,
    #[error("measure is not a probability measure on the domain: {0}")]
    BadMeasure(String),
    #[error("equilibrium measure missing from capacity estimate")]
    MissingEquilibrium,
    #[error("spectral precondition violated: {0}")]
    SpectralPrecondition(String),
    #[error("rejection sampling budget of {budget} exhausted (acceptance estimate {acceptance:.2e})")]
    RejectionBudget { budget: u64, acceptance: f64 },
    #[error("level {level} exceeds sample level {max}")]
    LevelTooHigh { level: f64, max: f64 },
    #[error("window too small: {0}")]
    WindowTooSmall(String),
    #[error("target unreachable inside the lattice window")]
    Unreachable,
    #[error("local-time field does not cover B(z, 3R) for every renormalized site")]
    CoverageInsufficient,
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("graph description parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;
