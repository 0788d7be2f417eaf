//! 2:4 masks that hold along rows and columns, so both `W` and `W^T` are
//! 2:4 sparse. Each aligned 4x4 tile is solved independently.

use std::sync::OnceLock;

use super::PruneResult;
use crate::codec::Mask;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransposableMode {
    /// Accept entries in descending magnitude while row and column quotas allow,
    /// then complete to a valid mask.
    Greedy,
    /// Best of all 90 valid 4x4 masks per tile.
    Exhaustive,
}

/// The 90 valid 4x4 tile masks (every row and column keeps exactly two), as
/// 16-bit sets with bit `4 * row + col`. Built from the six 2-of-4 row choices.
pub fn tile_candidates() -> &'static [u16] {
    static CANDIDATES: OnceLock<Vec<u16>> = OnceLock::new();
    CANDIDATES.get_or_init(|| {
        let rows: Vec<u16> = (0u16..16).filter(|r| r.count_ones() == 2).collect();
        let mut out = Vec::with_capacity(90);
        for &r0 in &rows {
            for &r1 in &rows {
                for &r2 in &rows {
                    for &r3 in &rows {
                        let cols_ok = (0..4).all(|c| [r0, r1, r2, r3].iter().filter(|&&r| r >> c & 1 == 1).count() == 2);
                        if cols_ok {
                            out.push(r0 | r1 << 4 | r2 << 8 | r3 << 12);
                        }
                    }
                }
            }
        }
        out
    })
}

/// Row-major sum of the kept magnitudes of a tile.
fn tile_score(mags: &[f64; 16], mask: u16) -> f64 {
    (0..16).filter(|&i| mask >> i & 1 == 1).map(|i| mags[i]).sum()
}

fn exhaustive_tile(mags: &[f64; 16]) -> u16 {
    let mut best = (f64::NEG_INFINITY, 0u16);
    for &c in tile_candidates() {
        let s = tile_score(mags, c);
        if s > best.0 {
            best = (s, c);
        }
    }
    best.1
}

fn greedy_tile(mags: &[f64; 16]) -> u16 {
    let mut order: Vec<usize> = (0..16).collect();
    order.sort_by(|&a, &b| mags[b].total_cmp(&mags[a]).then(a.cmp(&b)));
    let (mut row_n, mut col_n) = ([0u8; 4], [0u8; 4]);
    let mut accepted: Vec<usize> = Vec::with_capacity(8);
    for i in order {
        let (r, c) = (i / 4, i % 4);
        if row_n[r] < 2 && col_n[c] < 2 {
            row_n[r] += 1;
            col_n[c] += 1;
            accepted.push(i);
        }
    }
    // Complete with the best valid mask containing every accepted entry. When
    // the greedy picks cannot be completed, give up the most recent pick.
    loop {
        let required = accepted.iter().fold(0u16, |m, &i| m | 1 << i);
        let mut best: Option<(f64, u16)> = None;
        for &c in tile_candidates() {
            if c & required == required {
                let s = tile_score(mags, c);
                if best.is_none_or(|b| s > b.0) {
                    best = Some((s, c));
                }
            }
        }
        if let Some((_, c)) = best {
            return c;
        }
        accepted.pop();
    }
}

/// Finds a 2:4 mask valid along both rows and columns of every aligned 4x4 tile.
pub fn find_transposable_mask(w: &DenseMatrix, mode: TransposableMode) -> Result<PruneResult> {
    for (what, value) in [("rows", w.rows()), ("cols", w.cols())] {
        if value % 4 != 0 {
            return Err(Error::NotMultiple { what, value, multiple: 4 });
        }
    }
    let tiles_c = w.cols() / 4;
    let n_tiles = w.rows() / 4 * tiles_c;
    let masks = par::map_range(n_tiles, |t| {
        let (r0, c0) = (t / tiles_c * 4, t % tiles_c * 4);
        let mut mags = [0.0f64; 16];
        for (i, m) in mags.iter_mut().enumerate() {
            *m = w.get_f64(r0 + i / 4, c0 + i % 4).abs();
        }
        match mode {
            TransposableMode::Exhaustive => exhaustive_tile(&mags),
            TransposableMode::Greedy => greedy_tile(&mags),
        }
    });
    let mut mask = Mask::empty(w.rows(), w.cols());
    for (t, bits) in masks.into_iter().enumerate() {
        let (r0, c0) = (t / tiles_c * 4, t % tiles_c * 4);
        for i in 0..16 {
            if bits >> i & 1 == 1 {
                mask.set(r0 + i / 4, c0 + i % 4, true);
            }
        }
    }
    Ok(PruneResult::from_mask(w, mask))
}
