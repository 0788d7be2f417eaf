//! Sparse x dense GEMM over the compressed operand.
//!
//! The kernel never reconstructs the dense `A`. For each output row it expands
//! the row's metadata into absolute `k` offsets (one per stored value) and
//! multiplies each stored value against the matching row of `B`, so a 2:4
//! operand performs half the multiply-adds of the dense product.
//!
//! Work is split into output tiles of `tile_rows x tile_cols`; within a tile the
//! contracted dimension is walked in `tile_depth` blocks. Partial sums stay in
//! the output tile and every `(i, j)` is reduced over ascending `k`, so the
//! result is bit-identical for any plan and equal to [`gemm_dense`] on the
//! decompressed operand (up to the sign of zero sums).
//!
//! [`gemm_dense`]: crate::tensor::gemm_dense

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{compress, decompress, SparseNM};
use crate::error::{Error, Result};
use crate::gen;
use crate::par;
use crate::tensor::gemm::{check_operand, with_mac, AccBuffer, InSlice, Mac};
use crate::tensor::{DenseMatrix, Element, GemmShape, NMPattern, NumericFormat};

/// Blocking and threading parameters for [`spmm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpmmPlan {
    pub tile_rows: usize,
    pub tile_cols: usize,
    /// Depth block along `K`; must be a multiple of the pattern's `m`.
    pub tile_depth: usize,
    /// Worker count. 0 uses the global pool, 1 runs sequentially.
    pub threads: usize,
}

impl Default for SpmmPlan {
    fn default() -> Self {
        SpmmPlan { tile_rows: 16, tile_cols: 256, tile_depth: 256, threads: 0 }
    }
}

impl SpmmPlan {
    pub fn new(tile_rows: usize, tile_cols: usize, tile_depth: usize, threads: usize) -> Self {
        SpmmPlan { tile_rows, tile_cols, tile_depth, threads }
    }

    pub fn sequential() -> Self {
        SpmmPlan { threads: 1, ..Default::default() }
    }

    pub fn validate(&self, pattern: NMPattern) -> Result<()> {
        if self.tile_rows == 0 || self.tile_cols == 0 || self.tile_depth == 0 {
            return Err(Error::InvalidPlan("tile sizes must be positive".into()));
        }
        if self.tile_depth % pattern.m() != 0 {
            return Err(Error::InvalidPlan(format!(
                "tile depth {} is not a multiple of m = {}",
                self.tile_depth,
                pattern.m()
            )));
        }
        Ok(())
    }

    fn parallel(&self) -> bool {
        self.threads != 1 && par::available()
    }
}

/// Multiply-adds executed by a sparse GEMM: `M * N * K * n / m`.
pub fn spmm_flops(shape: GemmShape, pattern: NMPattern) -> u64 {
    let total = shape.m as u128 * shape.n as u128 * shape.k as u128 * pattern.n() as u128;
    (total / pattern.m() as u128) as u64
}

/// `C = A * B` with `A` in compressed N:M form.
pub fn spmm(a: &SparseNM, b: &DenseMatrix, format: NumericFormat, plan: &SpmmPlan) -> Result<DenseMatrix> {
    spmm_counted(a, b, format, plan).map(|(c, _)| c)
}

/// [`spmm`] that also returns the number of multiply-adds the kernel executed.
pub fn spmm_counted(
    a: &SparseNM,
    b: &DenseMatrix,
    format: NumericFormat,
    plan: &SpmmPlan,
) -> Result<(DenseMatrix, u64)> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch { op: "spmm", left: (a.rows(), a.cols()), right: (b.rows(), b.cols()) });
    }
    if a.dtype() != format.input() {
        return Err(Error::DTypeMismatch { expected: format.input(), found: a.dtype() });
    }
    check_operand(b, format)?;
    GemmShape::new(a.rows(), b.cols(), a.cols()).validate_sparse(format, a.pattern())?;
    plan.validate(a.pattern())?;

    let (rows, cols, kept) = (a.rows(), b.cols(), a.kept_per_row());
    let slots_per_tile = plan.tile_depth / a.pattern().m() * a.pattern().n();
    let (data, macs) = with_mac!(format, M => {
        let av = <M as Mac>::In::slice(a.values());
        let bv = <M as Mac>::In::slice(b.data());
        let (out, macs) = par::with_threads(plan.threads, || {
            tiled_kernel::<M, _>(rows, cols, kept, slots_per_tile, av, bv, plan, |r, offs| a.expand_row(r, offs))
        });
        (<M as Mac>::Acc::wrap(out), macs)
    });
    Ok((DenseMatrix::new(rows, cols, format.accumulator(), data)?, macs))
}

/// Dense GEMM using the same tiling as [`spmm`]; the baseline for benchmarks.
/// Bit-identical to [`crate::tensor::gemm_dense`].
pub fn gemm_dense_tiled(
    a: &DenseMatrix,
    b: &DenseMatrix,
    format: NumericFormat,
    plan: &SpmmPlan,
) -> Result<(DenseMatrix, u64)> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch { op: "gemm", left: (a.rows(), a.cols()), right: (b.rows(), b.cols()) });
    }
    check_operand(a, format)?;
    check_operand(b, format)?;
    if plan.tile_rows == 0 || plan.tile_cols == 0 || plan.tile_depth == 0 {
        return Err(Error::InvalidPlan("tile sizes must be positive".into()));
    }
    let (rows, cols, inner) = (a.rows(), b.cols(), a.cols());
    let (data, macs) = with_mac!(format, M => {
        let av = <M as Mac>::In::slice(a.data());
        let bv = <M as Mac>::In::slice(b.data());
        let (out, macs) = par::with_threads(plan.threads, || {
            tiled_kernel::<M, _>(rows, cols, inner, plan.tile_depth, av, bv, plan, |_, offs| {
                offs.clear();
                offs.extend(0..inner);
            })
        });
        (<M as Mac>::Acc::wrap(out), macs)
    });
    Ok((DenseMatrix::new(rows, cols, format.accumulator(), data)?, macs))
}

/// Shared tile loop. Row `i` of the left operand is `slots` values at
/// `av[i * slots..]`, slot `s` multiplying row `offsets[s]` of `B`.
#[allow(clippy::too_many_arguments)]
fn tiled_kernel<M: Mac, F>(
    rows: usize,
    cols: usize,
    slots: usize,
    slots_per_tile: usize,
    av: &[M::In],
    bv: &[M::In],
    plan: &SpmmPlan,
    expand: F,
) -> (Vec<M::Acc>, u64)
where
    F: Fn(usize, &mut Vec<usize>) + Sync + Send,
{
    let mut out = vec![M::Acc::ZERO; rows * cols];
    if cols == 0 {
        return (out, 0);
    }
    let block = plan.tile_rows * cols;
    let n_blocks = rows.div_ceil(plan.tile_rows);
    let mut counts = vec![0u64; n_blocks];
    {
        let mut work: Vec<(&mut [M::Acc], &mut u64)> = out.chunks_mut(block).zip(counts.iter_mut()).collect();
        par::for_each_chunk_mut(&mut work, 1, plan.parallel(), |bi, item| {
            let (c_block, count) = &mut item[0];
            **count = row_block::<M, F>(bi * plan.tile_rows, c_block, cols, slots, slots_per_tile, av, bv, plan, &expand);
        });
    }
    (out, counts.iter().sum())
}

#[allow(clippy::too_many_arguments)]
fn row_block<M: Mac, F>(
    first_row: usize,
    c_block: &mut [M::Acc],
    cols: usize,
    slots: usize,
    slots_per_tile: usize,
    av: &[M::In],
    bv: &[M::In],
    plan: &SpmmPlan,
    expand: &F,
) -> u64
where
    F: Fn(usize, &mut Vec<usize>),
{
    let n_rows = c_block.len() / cols;
    let mut offsets: Vec<Vec<usize>> = vec![Vec::with_capacity(slots); n_rows];
    for (i, offs) in offsets.iter_mut().enumerate() {
        expand(first_row + i, offs);
    }
    let mut macs = 0u64;
    for j0 in (0..cols).step_by(plan.tile_cols) {
        let tw = plan.tile_cols.min(cols - j0);
        for s0 in (0..slots).step_by(slots_per_tile.max(1)) {
            let s1 = (s0 + slots_per_tile).min(slots);
            for (i, offs) in offsets.iter().enumerate() {
                let a_row = &av[(first_row + i) * slots..(first_row + i + 1) * slots];
                let c_row = &mut c_block[i * cols + j0..i * cols + j0 + tw];
                let b_row = |s: usize| &bv[offs[s] * cols + j0..offs[s] * cols + j0 + tw];
                // Four slots per pass keep each output in a register for four
                // multiply-adds; the per-element order is still ascending.
                let mut s = s0;
                while s + 4 <= s1 {
                    let (a0, a1, a2, a3) = (a_row[s], a_row[s + 1], a_row[s + 2], a_row[s + 3]);
                    let (b0, b1, b2, b3) = (b_row(s), b_row(s + 1), b_row(s + 2), b_row(s + 3));
                    for (j, c) in c_row.iter_mut().enumerate() {
                        let mut acc = M::mac(*c, a0, b0[j]);
                        acc = M::mac(acc, a1, b1[j]);
                        acc = M::mac(acc, a2, b2[j]);
                        *c = M::mac(acc, a3, b3[j]);
                    }
                    s += 4;
                }
                for s in s..s1 {
                    let a = a_row[s];
                    for (c, &b) in c_row.iter_mut().zip(b_row(s)) {
                        *c = M::mac(*c, a, b);
                    }
                }
                macs += ((s1 - s0) * tw) as u64;
            }
        }
    }
    macs
}

/// One benchmarked shape.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub shape: GemmShape,
    pub dense_ns: u64,
    pub sparse_ns: u64,
    pub speedup: f64,
    pub flops_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub format: NumericFormat,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "M,N,K,dense_ns,sparse_ns,speedup,flops_ratio";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{:.4},{:.4}\n",
                r.shape.m, r.shape.n, r.shape.k, r.dense_ns, r.sparse_ns, r.speedup, r.flops_ratio
            ));
        }
        s
    }
}

/// Options for [`bench`].
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub format: NumericFormat,
    pub pattern: NMPattern,
    pub repeats: usize,
    pub plan: SpmmPlan,
    pub seed: u64,
    /// Shortest duration of one timing sample; fast shapes are run repeatedly.
    pub min_sample: Duration,
}

impl BenchConfig {
    pub fn new(format: NumericFormat) -> Self {
        let pattern = if format.input() == crate::tensor::DType::Tf32 {
            NMPattern::ONE_TWO
        } else {
            NMPattern::TWO_FOUR
        };
        BenchConfig { format, pattern, repeats: 5, plan: SpmmPlan::default(), seed: 0, min_sample: Duration::from_millis(20) }
    }
}

/// Times the tiled dense GEMM on the decompressed operand against [`spmm`]
/// on the compressed one. Each of the `repeats` rounds takes one dense sample
/// and then one sparse sample, each running the operation enough times to last
/// at least [`BenchConfig::min_sample`]. Times are per call, median over rounds;
/// the speedup is the median of the per-round ratios, so slow drift of the host
/// cancels within a round.
pub fn bench(sizes: &[GemmShape], cfg: &BenchConfig) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input = cfg.format.input();
    let repeats = cfg.repeats.max(1);
    let mut rows = Vec::with_capacity(sizes.len());
    for &shape in sizes {
        shape.validate_sparse(cfg.format, cfg.pattern)?;
        let a_dense = gen::random_conforming(shape.m, shape.k, input, cfg.pattern, &mut rng);
        let a = compress(&a_dense, cfg.pattern)?;
        let a_dense = decompress(&a);
        let b = gen::random_dense(shape.k, shape.n, input, &mut rng);

        let dense = || gemm_dense_tiled(&a_dense, &b, cfg.format, &cfg.plan);
        let sparse = || spmm_counted(&a, &b, cfg.format, &cfg.plan);
        let (dense_calls, dense_macs) = calls_per_sample(&dense, cfg.min_sample)?;
        let (sparse_calls, sparse_macs) = calls_per_sample(&sparse, cfg.min_sample)?;
        let mut dense_ns = Vec::with_capacity(repeats);
        let mut sparse_ns = Vec::with_capacity(repeats);
        let mut ratios = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let d = sample(&dense, dense_calls)?;
            let s = sample(&sparse, sparse_calls)?;
            dense_ns.push(d);
            sparse_ns.push(s);
            ratios.push(d as f64 / s as f64);
        }
        ratios.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            shape,
            dense_ns: median(&mut dense_ns),
            sparse_ns: median(&mut sparse_ns),
            speedup: median_f64(&ratios),
            flops_ratio: if sparse_macs == 0 { 0.0 } else { dense_macs as f64 / sparse_macs as f64 },
        });
    }
    Ok(BenchReport { format: cfg.format, rows })
}

/// Runs one warm-up call; returns how many calls fill a sample and the
/// multiply-adds of one call.
fn calls_per_sample<F>(op: &F, min_sample: Duration) -> Result<(u32, u64)>
where
    F: Fn() -> Result<(DenseMatrix, u64)>,
{
    let t = Instant::now();
    let (_, macs) = std::hint::black_box(op()?);
    let once = t.elapsed().max(Duration::from_nanos(1));
    Ok(((min_sample.as_nanos() / once.as_nanos()).clamp(1, 1_000_000) as u32, macs))
}

/// Nanoseconds per call over `calls` back-to-back calls.
fn sample<F>(op: &F, calls: u32) -> Result<u64>
where
    F: Fn() -> Result<(DenseMatrix, u64)>,
{
    let t = Instant::now();
    for _ in 0..calls {
        std::hint::black_box(op()?);
    }
    Ok(((t.elapsed().as_nanos() / calls as u128) as u64).max(1))
}

fn median_f64(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 }
}

fn median(v: &mut [u64]) -> u64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}
