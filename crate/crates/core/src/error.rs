use thiserror::Error;

/// Errors raised by the game model, the solvers and the decoding harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CageError {
    /// An input lies outside the mathematical domain of an operation
    /// (non-finite values, zero probabilities where a log is taken, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A box or nonnegativity constraint is violated.
    #[error("constraint violation: {0}")]
    Constraint(String),

    /// Vectors of incompatible lengths or malformed records.
    #[error("format error: {0}")]
    Format(String),

    /// The requested policy or problem has no feasible point.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("unsupported dimension {0}")]
    UnsupportedDimension(usize),

    /// A documented precondition of an operation does not hold.
    #[error("precondition failed: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, CageError>;
