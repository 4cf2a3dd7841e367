//! Block-parallel map with an order-preserving result, so reductions done
//! over the returned vector are independent of the thread count.

use std::ops::Range;

/// Splits `0..n` into contiguous blocks whose boundaries depend only on `n`.
pub(crate) fn blocks(n: usize, min_block: usize, max_blocks: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let len = min_block.max(n.div_ceil(max_blocks.max(1)));
    (0..n)
        .step_by(len)
        .map(|s| s..(s + len).min(n))
        .collect()
}

#[cfg(feature = "parallel")]
pub(crate) fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}
