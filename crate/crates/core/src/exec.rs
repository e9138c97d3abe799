//! Sequential/parallel dispatch for the data-parallel inner loops.
//!
//! Every parallel loop in this crate maps independent items to independent
//! output slots, so the parallel and sequential paths produce bit-identical
//! results. The `parallel` feature selects the default; `*_seq` entry points
//! stay available for benchmarks and equivalence tests.

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is enabled.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}

/// Sequential reference path for [`map_indexed`].
pub(crate) fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
