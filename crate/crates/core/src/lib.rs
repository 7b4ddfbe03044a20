//! Numerical laboratory for singular-integral kernels on the solvable Lie
//! group `G = R^2 x R+` (the hyperbolic half-space `H^3` with its group
//! structure).
//!
//! The crate provides exact group arithmetic and hyperbolic geometry
//! ([`group`]), closed-form evaluation of the heat / potential / derivative
//! kernels attached to the distinguished Laplacian ([`kernels`]), a truncated
//! asymptotic term calculus that derives far-field kernel expansions
//! mechanically ([`terms`]), Calderon-Zygmund sets, atoms and the
//! counterexample kits used in the divergence experiments ([`cz`]), and a
//! deterministic adaptive quadrature engine with tail-scan fitting
//! ([`quad`]).
//!
//! All public entry points are pure functions of their inputs: values are
//! freely shareable across threads and repeated runs produce bit-identical
//! results.

pub mod cz;
pub mod error;
pub mod group;
pub mod kernels;
pub mod quad;
pub mod terms;

pub use error::CoreError;
pub use group::{FieldIndex, GroupPoint, LogCoords};
pub use quad::{GridFn2, QuadResult, ScanReport};
pub use terms::{ExpSeries, Monomial, TermSum};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;

/// Builds a rayon thread pool sized by the `RIESZLAB_THREADS` environment
/// variable (all available cores when unset). Reductions everywhere are
/// ordered by index, so the worker count never changes results.
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("RIESZLAB_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        });
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("failed to build thread pool")
}
