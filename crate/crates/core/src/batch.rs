//! Fan-out of independent `(batch, head)` slices onto worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Leading `(B, h)` extents of a `B×h×L×C` tensor.
pub(crate) fn leading_dims(t: &DenseTensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[b, h, _, _] => Ok((b, h)),
        other => Err(Error::ShapeMismatch {
            op,
            expected: vec![0, 0, 0, 0],
            actual: other.to_vec(),
        }),
    }
}

/// Runs `f` on every slice index in parallel. Results come back in slice
/// order regardless of scheduling; the first failing slice (in order) wins
/// and is annotated with its `(batch, head)` position.
pub(crate) fn par_map_slices<T, F>(batch: usize, heads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let results: Vec<Result<T>> = (0..batch * heads).into_par_iter().map(&f).collect();
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Slice {
                batch: i / heads,
                head: i % heads,
                source: Box::new(e),
            })
        })
        .collect()
}
