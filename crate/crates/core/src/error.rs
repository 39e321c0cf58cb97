use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid spin {0}: 2s must be a non-negative integer")]
    InvalidSpin(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("operators are linearly dependent (smallest/largest singular value {ratio:e})")]
    LinearlyDependent { ratio: f64 },
    #[error("state is not normalized (norm {0})")]
    NotNormalized(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no real angle: |ratio| = {0} exceeds 1")]
    NoRealAngle(f64),
    #[error("angle {0} is at a separable endpoint (0 or pi)")]
    DegenerateAngle(f64),
    #[error("hamiltonian is not hermitian (deviation {0:e})")]
    NotHermitian(f64),
    #[error("state is not an eigenstate of total S^z (residual {0:e})")]
    NotZeroMagnetization(f64),
    #[error("operator set is not closed under commutation (residual {0:e})")]
    NotClosed(f64),
    #[error("dimension {dim} exceeds cap {cap}")]
    CapExceeded { dim: usize, cap: usize },
    #[error("eigensolver did not converge (best residual {0:e})")]
    NoConvergence(f64),
    #[error("unrecognized family: {0}")]
    UnknownFamily(String),
    #[error("parameter constraint violated: {0}")]
    Constraint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
