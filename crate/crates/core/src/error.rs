//! Crate-wide error type.

use alloc::string::String;

/// Errors reported by the numerical routines.
///
/// Index payloads are 0-based unless noted otherwise.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Matrix or vector dimensions do not match the operation's contract.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An index argument is outside its declared range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// The Jacobi eigensolver did not reach its off-diagonal threshold.
    #[error("eigendecomposition did not converge: off-diagonal residual {residual:e} after {sweeps} sweeps")]
    EigNonConvergence { residual: f64, sweeps: usize },

    /// Cholesky hit a non-positive pivot; `pivot` is the failing row.
    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    PositiveDefinitenessViolation { pivot: usize, value: f64 },

    /// A forward or backward pass produced a non-finite value.
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    /// Refusal to materialize a dense object above the configured cap.
    #[error("dense block of size {n}x{n} exceeds cap {cap}")]
    BlockOverCap { n: usize, cap: usize },

    /// Input collection was empty where at least one element is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Catch-all for violated preconditions.
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = core::result::Result<T, Error>;
