//! Column permutations applied before pruning.
//!
//! Reordering the columns of a weight matrix changes which values share a
//! group, and so how much magnitude survives N:M pruning. Only the partition
//! of columns into groups matters (order inside a group and order of groups
//! do not change the retained magnitude), so the search space is the set of
//! distinct partitions: `C! / ((m!)^(C/m) * (C/m)!)`.
//!
//! The network function is preserved by permuting the rows of the layer that
//! produces this layer's input ([`propagate_permutation`]).

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{prune_magnitude, PruneResult};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{DenseMatrix, NMPattern};

/// A bijection on `[0, len)`. Applied to columns, output column `j` takes input column `perm[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    perm: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidPermutation(format!("{perm:?} is not a bijection")));
            }
        }
        Ok(Permutation { perm })
    }

    pub fn identity(len: usize) -> Self {
        Permutation { perm: (0..len).collect() }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        Permutation { perm: inv }
    }

    /// Expands a channel permutation to a column permutation where each
    /// channel owns `block` consecutive columns (e.g. `R*S` filter taps).
    pub fn expand_blocks(&self, block: usize) -> Permutation {
        let perm = self.perm.iter().flat_map(|&p| (0..block).map(move |t| p * block + t)).collect();
        Permutation { perm }
    }

    /// `out[:, j] = w[:, perm[j]]`.
    pub fn apply_columns(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        if w.cols() != self.len() {
            return Err(Error::InvalidPermutation(format!(
                "permutation of length {} applied to {} columns",
                self.len(),
                w.cols()
            )));
        }
        Ok(w.remap(w.rows(), w.cols(), |r, c| Some((r, self.perm[c]))))
    }

    /// `out[j, :] = w[perm[j], :]`.
    pub fn apply_rows(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        if w.rows() != self.len() {
            return Err(Error::InvalidPermutation(format!(
                "permutation of length {} applied to {} rows",
                self.len(),
                w.rows()
            )));
        }
        Ok(w.remap(w.rows(), w.cols(), |r, c| Some((self.perm[r], c))))
    }

    /// `out[j] = v[perm[j]]`, for bias vectors.
    pub fn apply_slice<T: Copy>(&self, v: &[T]) -> Vec<T> {
        self.perm.iter().map(|&p| v[p]).collect()
    }
}

/// Reorders the rows of the producer layer's weights so that a consumer whose
/// columns were permuted by `perm` computes the same function.
pub fn propagate_permutation(producer_w: &DenseMatrix, perm: &Permutation) -> Result<DenseMatrix> {
    perm.apply_rows(producer_w)
}

/// How much work [`find_permutation`] may do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchBudget {
    /// Visit every distinct group partition. Fails when there are more than
    /// [`SearchBudget::EXHAUSTIVE_LIMIT`] of them.
    Exhaustive,
    /// Steepest-ascent pairwise column swaps between groups, from the identity
    /// and from `restarts` seeded random starts. `max_evaluations` (candidate
    /// swaps scored) is shared evenly between the starts.
    Greedy { restarts: usize, max_evaluations: u64, seed: u64 },
}

impl SearchBudget {
    pub const EXHAUSTIVE_LIMIT: u128 = 10_000_000;

    pub fn greedy(seed: u64) -> Self {
        SearchBudget::Greedy { restarts: 4, max_evaluations: 200_000, seed }
    }
}

/// Outcome of a permutation search.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationSearch {
    pub permutation: Permutation,
    /// Magnitude pruning of the permuted matrix `perm.apply_columns(w)`.
    pub result: PruneResult,
    /// Magnitude pruning of the unpermuted matrix.
    pub baseline: PruneResult,
    /// Distinct group partitions visited (exhaustive mode).
    pub partitions_visited: u64,
    /// Candidate swaps scored (greedy mode).
    pub evaluations: u64,
}

/// Number of distinct partitions of `cols` columns into groups of `m`:
/// `cols! / ((m!)^(cols/m) * (cols/m)!)`. `None` on overflow.
pub fn partition_count(cols: usize, m: usize) -> Option<u128> {
    if m == 0 || cols % m != 0 {
        return Some(0);
    }
    // Product over groups of C(remaining - 1, m - 1): the first remaining
    // column is always placed in the next group.
    let mut total: u128 = 1;
    let mut remaining = cols;
    while remaining > 0 {
        total = total.checked_mul(binomial(remaining - 1, m - 1)?)?;
        remaining -= m;
    }
    Some(total)
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    let mut r: u128 = 1;
    for i in 0..k {
        r = r.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(r)
}

/// Searches for a column permutation that maximises the magnitude retained by
/// N:M pruning. The identity is always a candidate, so the result never keeps
/// less than pruning the matrix as is.
pub fn find_permutation(w: &DenseMatrix, pattern: NMPattern, budget: SearchBudget) -> Result<PermutationSearch> {
    pattern.check_divides(w.cols())?;
    let scorer = Scorer::new(w, pattern);
    let (groups, partitions_visited, evaluations) = match budget {
        SearchBudget::Exhaustive => {
            let count = partition_count(w.cols(), pattern.m()).unwrap_or(u128::MAX);
            if count > SearchBudget::EXHAUSTIVE_LIMIT {
                return Err(Error::SearchTooLarge(count));
            }
            let (g, visited) = exhaustive(&scorer);
            (g, visited, 0)
        }
        SearchBudget::Greedy { restarts, max_evaluations, seed } => {
            let (g, evals) = greedy(&scorer, restarts, max_evaluations, seed);
            (g, 0, evals)
        }
    };
    let permutation = Permutation::new(groups.into_iter().flatten().collect())?;
    let baseline = prune_magnitude(w, pattern)?;
    let result = prune_magnitude(&permutation.apply_columns(w)?, pattern)?;
    // Different summation orders can differ in the last bit; never report a
    // permutation that retains less than the identity.
    let (permutation, result) = if result.retained_magnitude < baseline.retained_magnitude {
        (Permutation::identity(w.cols()), baseline.clone())
    } else {
        (permutation, result)
    };
    Ok(PermutationSearch { permutation, result, baseline, partitions_visited, evaluations })
}

/// Per-group objective: sum over rows of the `n` largest `|w|` among the group's columns.
struct Scorer {
    mags: Vec<f64>,
    rows: usize,
    cols: usize,
    n: usize,
    m: usize,
}

impl Scorer {
    fn new(w: &DenseMatrix, pattern: NMPattern) -> Self {
        let mags = w.to_f64_vec().into_iter().map(f64::abs).collect();
        Scorer { mags, rows: w.rows(), cols: w.cols(), n: pattern.n(), m: pattern.m() }
    }

    fn group(&self, cols: &[usize]) -> f64 {
        let mut buf = vec![0.0f64; cols.len()];
        let mut total = 0.0;
        for r in 0..self.rows {
            for (b, &c) in buf.iter_mut().zip(cols) {
                *b = self.mags[r * self.cols + c];
            }
            buf.sort_by(|a, b| b.total_cmp(a));
            total += buf[..self.n].iter().sum::<f64>();
        }
        total
    }

    fn identity_groups(&self) -> Vec<Vec<usize>> {
        (0..self.cols / self.m).map(|g| (g * self.m..(g + 1) * self.m).collect()).collect()
    }
}

/// Visits every partition; the first one visited is the identity grouping.
fn exhaustive(scorer: &Scorer) -> (Vec<Vec<usize>>, u64) {
    struct State<'a> {
        scorer: &'a Scorer,
        cache: HashMap<Vec<usize>, f64>,
        current: Vec<Vec<usize>>,
        best: Option<(f64, Vec<Vec<usize>>)>,
        visited: u64,
    }

    fn score(state: &mut State<'_>, group: &[usize]) -> f64 {
        // Groups are generated in ascending column order, so the column list is a canonical key.
        if let Some(&s) = state.cache.get(group) {
            return s;
        }
        let s = state.scorer.group(group);
        state.cache.insert(group.to_vec(), s);
        s
    }

    fn recurse(state: &mut State<'_>, remaining: &[usize], partial: f64) {
        if remaining.is_empty() {
            state.visited += 1;
            if state.best.as_ref().is_none_or(|(b, _)| partial > *b) {
                state.best = Some((partial, state.current.clone()));
            }
            return;
        }
        let m = state.scorer.m;
        let (first, rest) = (remaining[0], &remaining[1..]);
        for combo in combinations(rest.len(), m - 1) {
            let mut group = Vec::with_capacity(m);
            group.push(first);
            group.extend(combo.iter().map(|&i| rest[i]));
            let left: Vec<usize> = rest.iter().enumerate().filter(|(i, _)| !combo.contains(i)).map(|(_, &c)| c).collect();
            let s = score(state, &group);
            state.current.push(group);
            recurse(state, &left, partial + s);
            state.current.pop();
        }
    }

    let mut state = State { scorer, cache: HashMap::new(), current: Vec::new(), best: None, visited: 0 };
    let all: Vec<usize> = (0..scorer.cols).collect();
    recurse(&mut state, &all, 0.0);
    let groups = state.best.map(|(_, g)| g).unwrap_or_default();
    (groups, state.visited)
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

fn greedy(scorer: &Scorer, restarts: usize, max_evaluations: u64, seed: u64) -> (Vec<Vec<usize>>, u64) {
    let starts = restarts + 1;
    let per_start = (max_evaluations / starts as u64).max(1);
    let runs = par::map_range(starts, |s| {
        let mut groups = scorer.identity_groups();
        if s > 0 {
            let mut cols: Vec<usize> = (0..scorer.cols).collect();
            cols.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64)));
            groups = cols.chunks(scorer.m).map(|c| c.to_vec()).collect();
        }
        let (score, evals) = climb(scorer, &mut groups, per_start);
        (score, groups, evals)
    });
    let evaluations = runs.iter().map(|r| r.2).sum();
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for (score, groups, _) in runs {
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, groups));
        }
    }
    let mut groups = best.map(|(_, g)| g).unwrap_or_default();
    for g in &mut groups {
        g.sort_unstable();
    }
    (groups, evaluations)
}

/// Steepest ascent over single swaps between two groups. Returns the final
/// objective and the number of candidate swaps scored.
fn climb(scorer: &Scorer, groups: &mut [Vec<usize>], budget: u64) -> (f64, u64) {
    let mut scores: Vec<f64> = groups.iter().map(|g| scorer.group(g)).collect();
    let mut evals = 0u64;
    let m = scorer.m;
    'outer: loop {
        let total: f64 = scores.iter().sum();
        let tol = 1e-12 * (1.0 + total.abs());
        let mut best: Option<(f64, usize, usize, usize, usize, f64, f64)> = None;
        for ga in 0..groups.len() {
            for gb in ga + 1..groups.len() {
                for ia in 0..m {
                    for ib in 0..m {
                        if evals >= budget {
                            break 'outer;
                        }
                        evals += 1;
                        let mut a = groups[ga].clone();
                        let mut b = groups[gb].clone();
                        std::mem::swap(&mut a[ia], &mut b[ib]);
                        let (sa, sb) = (scorer.group(&a), scorer.group(&b));
                        let delta = (sa + sb) - (scores[ga] + scores[gb]);
                        if delta > tol && best.is_none_or(|bst| delta > bst.0) {
                            best = Some((delta, ga, gb, ia, ib, sa, sb));
                        }
                    }
                }
            }
        }
        match best {
            Some((_, ga, gb, ia, ib, sa, sb)) => {
                let tmp = groups[ga][ia];
                groups[ga][ia] = groups[gb][ib];
                groups[gb][ib] = tmp;
                scores[ga] = sa;
                scores[gb] = sb;
            }
            None => break,
        }
    }
    (scores.iter().sum(), evals)
}
