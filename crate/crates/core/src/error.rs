use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("multiplicity {r} outside 1..={max}")]
    MultiplicityOutOfRange { r: usize, max: usize },
    #[error("invalid round: {0}")]
    InvalidRound(String),
    #[error("value {0} is not a support point of the coupling source")]
    UnknownWinProbability(f64),
    #[error("coupling construction failed for r={r}: residual {residual:e} at {cells} cells")]
    CouplingInfeasible { r: usize, cells: usize, residual: f64 },
    #[error("quadrature tail did not vanish by t={0}")]
    NonVanishingTail(f64),
    #[error("bisection did not converge: {0}")]
    Bisection(String),
    #[error("duality violated at step {step}: {detail}")]
    DualityViolation { step: usize, detail: String },
    #[error("instance too large: {0}")]
    InstanceTooLarge(String),
    #[error("malformed input: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
