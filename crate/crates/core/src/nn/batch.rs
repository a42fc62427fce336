use rayon::prelude::*;

use super::params::{Gradients, ParamStore};
use crate::error::Result;

/// Items per gradient chunk. Chunking is fixed rather than derived from the
/// thread count, so the floating-point reduction order (and every result
/// bit) is the same on one thread or many.
pub const CHUNK: usize = 4;

/// Runs `f` over `items`, each call adding its gradient into a per-chunk
/// buffer, and sums the chunk buffers in order. Per-item outputs come back
/// in item order.
pub fn accumulate<T, S, F>(store: &ParamStore, items: &[T], f: F) -> Result<(Gradients, Vec<S>)>
where
    T: Sync,
    S: Send,
    F: Fn(&T, &mut Gradients) -> Result<S> + Sync,
{
    let parts: Vec<Result<(Gradients, Vec<S>)>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Gradients::zeros_like(store);
            let mut out = Vec::with_capacity(chunk.len());
            for item in chunk {
                out.push(f(item, &mut g)?);
            }
            Ok((g, out))
        })
        .collect();
    let mut total = Gradients::zeros_like(store);
    let mut outputs = Vec::with_capacity(items.len());
    for part in parts {
        let (g, out) = part?;
        total.add_scaled(&g, 1.0);
        outputs.extend(out);
    }
    Ok((total, outputs))
}

/// Order-preserving parallel map for read-only work.
pub fn map<T, S, F>(items: &[T], f: F) -> Result<Vec<S>>
where
    T: Sync,
    S: Send,
    F: Fn(&T) -> Result<S> + Sync,
{
    items.par_iter().map(&f).collect()
}
