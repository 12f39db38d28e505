//! Deterministic parallel accumulation.
//!
//! Items are grouped into chunks whose size depends only on the item count,
//! each chunk is summed sequentially, and the chunk partials are combined by
//! a fixed pairwise tree. The result is bit-identical for any thread count.

use rayon::prelude::*;

pub(crate) const DEFAULT_CHUNK: usize = 16;

/// Accumulate `f(i, acc)` over `0..n_items` into a zeroed buffer of `len`.
pub(crate) fn chunked_sum<F>(n_items: usize, len: usize, chunk: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let chunk = chunk.max(1);
    let n_chunks = n_items.div_ceil(chunk);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            for i in c * chunk..((c + 1) * chunk).min(n_items) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    tree_sum(partials, len)
}

fn tree_sum(mut parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    if parts.is_empty() {
        return vec![0.0; len];
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}
