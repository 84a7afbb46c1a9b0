//! Data-parallel dispatch with a sequential fallback.
//!
//! The heavy inner loops (convolution rows, per-slot rendering, per-window
//! SSIM sums) are expressed as an indexed map over *disjoint* output chunks:
//! chunk `i` is computed from read-only inputs and written to slot `i` of a
//! pre-allocated output. Because no reduction order is involved, the rayon
//! and sequential paths produce bit-identical results.
//!
//! With the `parallel` feature enabled (the default) both implementations
//! are compiled — `for_each_indexed` dispatches to rayon while the `_seq`
//! variants stay available so the criterion benches can compare the two.
//! Without the feature only the sequential path exists.

/// Apply `f(i, &mut out[i])` for every element of `out`, sequentially.
pub fn for_each_indexed_seq<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    for (i, slot) in out.iter_mut().enumerate() {
        f(i, slot);
    }
}

/// Apply `f(i, &mut out[i])` for every element of `out` on the rayon pool.
#[cfg(feature = "parallel")]
pub fn for_each_indexed_par<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    use rayon::prelude::*;
    out.par_iter_mut().enumerate().for_each(|(i, slot)| f(i, slot));
}

/// Feature-dispatched indexed map over disjoint output slots.
#[inline]
pub fn for_each_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        for_each_indexed_par(out, f);
    }
    #[cfg(not(feature = "parallel"))]
    {
        for_each_indexed_seq(out, f);
    }
}

/// Apply `f` to every chunk of exactly `chunk_len` elements, sequentially.
/// `data.len()` must be a multiple of `chunk_len`.
pub fn for_each_chunk_seq<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert_eq!(data.len() % chunk_len.max(1), 0);
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

/// Parallel variant of [`for_each_chunk_seq`].
#[cfg(feature = "parallel")]
pub fn for_each_chunk_par<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    debug_assert_eq!(data.len() % chunk_len.max(1), 0);
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

/// Feature-dispatched chunked map over a flat output buffer.
#[inline]
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        for_each_chunk_par(data, chunk_len, f);
    }
    #[cfg(not(feature = "parallel"))]
    {
        for_each_chunk_seq(data, chunk_len, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(i: usize, v: &mut f64) {
        // Mildly irregular work so scheduling differences would show up
        // if the decomposition were not slot-disjoint.
        let mut acc = 0.0f64;
        for k in 0..(i % 7 + 1) {
            acc += ((i * 31 + k) as f64).sin();
        }
        *v = acc;
    }

    #[test]
    fn seq_matches_dispatch_bitwise() {
        // [DERIVED] oracle: the sequential path defines the expected bits.
        let mut a = vec![0.0f64; 257];
        let mut b = vec![0.0f64; 257];
        for_each_indexed_seq(&mut a, fill);
        for_each_indexed(&mut b, fill);
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn chunked_seq_matches_dispatch_bitwise() {
        let task = |i: usize, chunk: &mut [f64]| {
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = ((i * 97 + j * 13) as f64).cos();
            }
        };
        let mut a = vec![0.0f64; 24 * 33];
        let mut b = vec![0.0f64; 24 * 33];
        for_each_chunk_seq(&mut a, 33, task);
        for_each_chunk(&mut b, 33, task);
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
