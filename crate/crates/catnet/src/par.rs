//! Deterministic data-parallel helpers.
//!
//! Work is split into fixed-size chunks, each chunk is mapped
//! independently, and the chunk results are merged left to right. The
//! chunking and merge order never depend on the worker count, so the
//! parallel and sequential paths produce bit-identical results and a run is
//! reproducible regardless of how many threads rayon decides to use.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk size for batch-level parallelism. Small enough to load-balance a
/// 64-sample batch across a handful of workers, large enough that the
/// per-chunk merge cost stays negligible.
pub const CHUNK: usize = 4;

/// Map fixed chunks of `items` and merge the results in chunk order.
/// Parallel when the `parallel` feature is enabled.
pub fn chunk_map_reduce<T, R>(
    items: &[T],
    chunk: usize,
    map: impl Fn(&[T]) -> R + Sync + Send,
    merge: impl Fn(R, R) -> R,
) -> Option<R>
where
    T: Sync,
    R: Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        let parts: Vec<R> = items.par_chunks(chunk).map(|c| map(c)).collect();
        parts.into_iter().reduce(merge)
    }
    #[cfg(not(feature = "parallel"))]
    {
        chunk_map_reduce_seq(items, chunk, map, merge)
    }
}

/// Sequential twin of [`chunk_map_reduce`] with identical chunking and merge
/// order. Exists so benchmarks and determinism tests can compare the two
/// paths inside one build.
pub fn chunk_map_reduce_seq<T, R>(
    items: &[T],
    chunk: usize,
    map: impl Fn(&[T]) -> R,
    merge: impl Fn(R, R) -> R,
) -> Option<R> {
    let chunk = chunk.max(1);
    items.chunks(chunk).map(map).reduce(merge)
}

/// Map every item, preserving order. Parallel when the feature is enabled.
pub fn map_collect<T, R>(items: &[T], map: impl Fn(&T) -> R + Sync + Send) -> Vec<R>
where
    T: Sync,
    R: Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(map).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(map).collect()
    }
}
