//! Execution policy for the data-parallel voxel and pixel loops.
//!
//! Every parallel path produces results bit-identical to the sequential one:
//! element-wise maps are order-preserving, and reductions are split into
//! fixed-size chunks whose partial results are folded in index order.

use std::ops::Range;

/// Number of items reduced together before partial results are folded.
/// Independent of the thread count so reductions stay reproducible.
pub const REDUCE_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Exec {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled, otherwise
    /// falls back to sequential execution.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Order-preserving map over `0..n`.
pub fn map_range<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Splits `0..n` into consecutive chunks of [`REDUCE_CHUNK`] items and maps
/// each chunk; the returned partials are in chunk order.
pub fn map_chunks<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    map_range(exec, chunks, |c| {
        let start = c * REDUCE_CHUNK;
        f(start..(start + REDUCE_CHUNK).min(n))
    })
}
