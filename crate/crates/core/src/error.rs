//! Error type shared by all modules.

use thiserror::Error;

/// Errors surfaced by the group, kernel, term-calculus, quadrature and
/// Calderon-Zygmund modules.
#[derive(Debug, Clone, Error)]
pub enum CoreError {
    /// A point failed the construction invariants (finite coordinates,
    /// height within the representable window).
    #[error("invalid group point: {0}")]
    InvalidPoint(String),

    /// A kernel was evaluated at its singularity.
    #[error("kernel singular at the requested point")]
    Singular,

    /// A function returned a non-finite value at a stencil or quadrature
    /// node.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// An asymptotic expansion was evaluated inside the closed unit ball
    /// where it is not valid.
    #[error("point with r = {r} is outside the expansion domain (need r > 1)")]
    OutOfDomain { r: f64 },

    /// Differentiation exhausted the truncation order of a series.
    #[error("series truncation order exhausted")]
    OrderExhausted,

    /// A derived expansion did not match the expected principal-part shape.
    #[error("expansion shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Exponent triples outside the admissible lattice.
    #[error("exponent {0:?} outside Z^3_+ (need m1, m2 >= 0 and m0 >= -1)")]
    BadExponent((i64, i64, i64)),

    /// The requested quadrature tolerance was not reached within the
    /// evaluation budget; carries the partial value and achieved error.
    #[error("quadrature budget exhausted: value {value}, error estimate {error} > tol {tol}")]
    BudgetExhausted { value: f64, error: f64, tol: f64 },

    /// Quadrature could not certify the requested tolerance.
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),

    /// A grid was too coarse to resolve the requested scale.
    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),

    /// Invalid parameters passed to a constructor or experiment.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A counterexample-kit search failed to find a usable configuration.
    #[error("kit search failed: {0}")]
    SearchFailure(String),

    /// A candidate function failed the atom conditions.
    #[error("not an atom: {0}")]
    NotAnAtom(String),
}
