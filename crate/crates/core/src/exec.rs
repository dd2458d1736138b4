//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run plain sequential loops. All helpers preserve item order, and
//! reductions go through fixed chunk boundaries folded sequentially, so
//! results are bit-identical regardless of thread count.

use std::ops::Range;

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_range<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U>(n: usize, f: impl Fn(usize) -> U) -> Vec<U> {
    (0..n).map(f).collect()
}

/// Map `f` over a slice, collecting results in order.
#[cfg(feature = "parallel")]
pub fn map_slice<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Run `f` on mutable chunks of `data`, `chunk` rows of width `width` each.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T: Send>(
    data: &mut [T],
    chunk_len: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    use rayon::prelude::*;
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T>(data: &mut [T], chunk_len: usize, f: impl Fn(usize, &mut [T])) {
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Compute per-chunk partial results over `0..n` with fixed chunk boundaries.
/// The caller folds the returned partials in order, which keeps floating-point
/// reductions deterministic.
pub fn chunk_partials<P: Send>(
    n: usize,
    chunk: usize,
    f: impl Fn(Range<usize>) -> P + Sync + Send,
) -> Vec<P> {
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    map_range(n_chunks, |i| {
        let lo = i * chunk;
        let hi = (lo + chunk).min(n);
        f(lo..hi)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn chunk_partials_covers_all_indices() {
        let parts = chunk_partials(103, 10, |r| r.len());
        assert_eq!(parts.iter().sum::<usize>(), 103);
        assert_eq!(parts.len(), 11);
    }
}
