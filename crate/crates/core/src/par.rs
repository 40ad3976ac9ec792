//! Voxelwise execution helpers.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it everything runs on the calling thread. Reductions are always
//! computed over fixed-size chunks and combined in chunk order, so results
//! are bit-identical regardless of thread count or feature selection.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length used for ordered reductions.
pub const REDUCE_CHUNK: usize = 4096;

/// Evaluate `f` for every index in `0..n`, preserving order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Apply `f(index, &mut item)` to every element of `out`.
pub fn for_each_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        out.par_iter_mut().enumerate().for_each(|(i, v)| f(i, v));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.iter_mut().enumerate().for_each(|(i, v)| f(i, v));
    }
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Deterministic reduction: `part` is evaluated on index ranges of
/// `REDUCE_CHUNK` elements, and partial results are folded left to right
/// with `combine`.
pub fn ordered_reduce<T, P, C>(n: usize, identity: T, part: P, combine: C) -> T
where
    T: Send + Clone,
    P: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    C: Fn(T, T) -> T,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_indices(chunks, |c| {
        let start = c * REDUCE_CHUNK;
        part(start..(start + REDUCE_CHUNK).min(n))
    });
    partials.into_iter().fold(identity, combine)
}

/// Ordered sum of `f(i)` over `0..n`.
pub fn ordered_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    ordered_reduce(n, 0.0, |r| r.map(&f).sum::<f64>(), |a, b| a + b)
}
