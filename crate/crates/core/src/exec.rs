//! Data-parallel fan-out with a sequential fallback.
//!
//! Rollout sampling, evaluation and entropy rescoring are
//! embarrassingly parallel over independent items. `map_indexed` runs
//! the closure for indices `0..n` and returns results in index order,
//! so the output (and anything folded from it in order) is identical
//! whether the work ran on one thread or many.
//!
//! With the `parallel` feature (default) the public entry point
//! dispatches to rayon; without it, to the plain loop. Both
//! implementations stay compiled when the feature is on so benches can
//! compare them directly.

/// Sequential implementation; always available.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    (0..n).map(f).collect()
}

/// Rayon implementation; preserves index order via ordered collect.
#[cfg(feature = "parallel")]
pub fn map_indexed_par<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is
/// enabled. Results are always in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    #[cfg(feature = "parallel")]
    {
        map_indexed_par(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}
