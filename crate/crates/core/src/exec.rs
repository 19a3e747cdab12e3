//! Execution strategy for data-parallel inner loops.
//!
//! With the `parallel` feature (default), maps run on the rayon pool; without
//! it they run sequentially. Both helpers place results positionally, so the
//! output is bit-identical regardless of feature or thread count. Callers keep
//! all floating-point reductions sequential.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Fills a row-major buffer by invoking `f(row, row_slice)` per row.
#[cfg(feature = "parallel")]
pub fn fill_rows<F>(buf: &mut [f64], dim: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    buf.par_chunks_mut(dim)
        .enumerate()
        .for_each(|(row, chunk)| f(row, chunk));
}

/// Fills a row-major buffer by invoking `f(row, row_slice)` per row.
#[cfg(not(feature = "parallel"))]
pub fn fill_rows<F>(buf: &mut [f64], dim: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    buf.chunks_mut(dim)
        .enumerate()
        .for_each(|(row, chunk)| f(row, chunk));
}
