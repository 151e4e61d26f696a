//! Data-parallel loop helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan work out through rayon;
//! without it they run plain loops. Every helper here only ever splits work
//! over disjoint output regions with a fixed, thread-count-independent chunk
//! geometry, and all accumulation inside a chunk is sequential. Both modes
//! therefore produce bit-identical results, which the test suite checks.
//!
//! The `*_serial` twins are always compiled so benchmarks can compare the two
//! paths in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(chunk_index, chunk)` over `data` split into chunks of `chunk_len`
/// elements (the final chunk may be shorter).
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    for_each_chunk_mut_serial(data, chunk_len, f);
}

/// Sequential twin of [`for_each_chunk_mut`].
pub fn for_each_chunk_mut_serial<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_serial(n, f)
    }
}

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_serial<O, F>(n: usize, f: F) -> Vec<O>
where
    F: Fn(usize) -> O,
{
    (0..n).map(f).collect()
}

/// Runs two closures, possibly in parallel, and returns both results.
pub fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::join(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (a(), b())
    }
}

/// Deterministic sum of an `f64`-convertible slice.
///
/// Chunk subtotals are computed independently (in parallel when enabled) and
/// then folded left to right, so the addition tree does not depend on the
/// thread count.
pub fn sum_f64<T: Copy + Into<f64> + Send + Sync>(data: &[T]) -> f64 {
    const CHUNK: usize = 4096;
    let partials = {
        #[cfg(feature = "parallel")]
        {
            data.par_chunks(CHUNK)
                .map(|c| c.iter().map(|&v| v.into()).sum::<f64>())
                .collect::<Vec<_>>()
        }
        #[cfg(not(feature = "parallel"))]
        {
            data.chunks(CHUNK)
                .map(|c| c.iter().map(|&v| v.into()).sum::<f64>())
                .collect::<Vec<_>>()
        }
    };
    partials.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_mutation_matches_serial() {
        let mut a: Vec<u64> = (0..10_000).collect();
        let mut b = a.clone();
        let f = |i: usize, c: &mut [u64]| {
            for v in c.iter_mut() {
                *v = v.wrapping_mul(31).wrapping_add(i as u64);
            }
        };
        for_each_chunk_mut(&mut a, 97, f);
        for_each_chunk_mut_serial(&mut b, 97, f);
        assert_eq!(a, b);
    }

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(1000, |i| i * i);
        let s = map_indexed_serial(1000, |i| i * i);
        assert_eq!(v, s);
        assert_eq!(v[37], 37 * 37);
    }

    #[test]
    fn sum_is_deterministic_and_close() {
        let data: Vec<f32> = (0..100_000).map(|i| ((i * 2654435761u64 as usize) % 997) as f32 * 1e-3).collect();
        let s1 = sum_f64(&data);
        let s2 = sum_f64(&data);
        assert_eq!(s1.to_bits(), s2.to_bits());
        let naive: f64 = data.iter().map(|&v| v as f64).sum();
        assert!((s1 - naive).abs() < 1e-6 * naive.abs().max(1.0));
    }
}
