//! Mask finding: magnitude N:M pruning, column-permutation search and
//! transposable 2:4 masks.

mod permute;
mod transposable;

pub use permute::{find_permutation, partition_count, propagate_permutation, Permutation, PermutationSearch, SearchBudget};
pub use transposable::{find_transposable_mask, tile_candidates, TransposableMode};

use crate::codec::Mask;
use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, NMPattern};

/// A mask together with the weight magnitude it keeps and drops.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    pub mask: Mask,
    /// Sum of `|w|` over kept positions, accumulated row-major.
    pub retained_magnitude: f64,
    /// Sum of `|w|` over dropped positions, accumulated row-major.
    pub lost_magnitude: f64,
}

impl PruneResult {
    pub(crate) fn from_mask(w: &DenseMatrix, mask: Mask) -> Self {
        let (mut retained, mut lost) = (0.0, 0.0);
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                let a = w.get_f64(r, c).abs();
                if mask.get(r, c) {
                    retained += a;
                } else {
                    lost += a;
                }
            }
        }
        PruneResult { mask, retained_magnitude: retained, lost_magnitude: lost }
    }
}

/// Keeps the `n` largest-magnitude entries of every aligned row group of `m`.
/// Equal magnitudes keep the lower index.
pub fn prune_magnitude(w: &DenseMatrix, pattern: NMPattern) -> Result<PruneResult> {
    pattern.check_divides(w.cols())?;
    let (n, m) = (pattern.n(), pattern.m());
    let mut mask = Mask::empty(w.rows(), w.cols());
    let mut mags = vec![0.0f64; m];
    for r in 0..w.rows() {
        for g in 0..w.cols() / m {
            for (i, slot) in mags.iter_mut().enumerate() {
                *slot = w.get_f64(r, g * m + i).abs();
            }
            for i in top_n(&mags, n) {
                mask.set(r, g * m + i, true);
            }
        }
    }
    Ok(PruneResult::from_mask(w, mask))
}

/// Indices of the `n` largest values, ties to the lower index, ascending.
pub(crate) fn top_n(values: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Elementwise `w * mask`; dropped positions become zero.
pub fn apply_mask(w: &DenseMatrix, mask: &Mask) -> Result<DenseMatrix> {
    if (w.rows(), w.cols()) != (mask.rows(), mask.cols()) {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            left: (w.rows(), w.cols()),
            right: (mask.rows(), mask.cols()),
        });
    }
    Ok(w.remap(w.rows(), w.cols(), |r, c| mask.get(r, c).then_some((r, c))))
}
