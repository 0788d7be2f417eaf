//! Acceptance checks, one line per criterion.
//!
//! `cargo test --release -p sparse24 --test acceptance` runs all of them;
//! numeric arguments (`-- 3 9`) select a subset. Every oracle here is written
//! against plain definitions and shares no code with the library beyond the
//! call under test.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse24::codec::{storage_bits_for, Axis};
use sparse24::pruner::{
    apply_mask, find_permutation, find_transposable_mask, propagate_permutation, prune_magnitude, Permutation,
    SearchBudget, TransposableMode,
};
use sparse24::quant::{calibrate, quantize, CalibMethod, Granularity, Histogram};
use sparse24::spmm::{bench, spmm_counted, BenchConfig};
use sparse24::workflow::{retrain_sparse, train, Dataset, Recipe, TinyNet, REFERENCE_RECIPE};
use sparse24::{
    check_conformance, compress, decompress, gemm_dense, storage_bits, DType, DenseMatrix, GemmShape, Mask, NMPattern,
    NumericFormat, SpmmPlan,
};

/// Why a criterion failed; library errors convert into it.
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type Outcome = Result<String, Failure>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(Failure(format!($($fmt)+)));
        }
    };
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 10] = [
    Criterion { id: 1, name: "storage arithmetic", limit: Duration::from_secs(1), run: storage_arithmetic },
    Criterion { id: 2, name: "codec roundtrip", limit: Duration::from_secs(10), run: codec_roundtrip },
    Criterion { id: 3, name: "sparse GEMM equivalence", limit: Duration::from_secs(60), run: spmm_equivalence },
    Criterion { id: 4, name: "mask optimality", limit: Duration::from_secs(30), run: mask_optimality },
    Criterion { id: 5, name: "permutation search", limit: Duration::from_secs(60), run: permutation_search },
    Criterion { id: 6, name: "permutation correctness", limit: Duration::from_secs(10), run: permutation_correctness },
    Criterion { id: 7, name: "workflow demo", limit: Duration::from_secs(120), run: workflow_demo },
    Criterion { id: 8, name: "gradient check", limit: Duration::from_secs(10), run: gradient_check },
    Criterion { id: 9, name: "bench trend", limit: Duration::from_secs(300), run: bench_trend },
    Criterion { id: 10, name: "quantization", limit: Duration::from_secs(60), run: quantization },
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(Failure(format!("panicked: {}", msg.unwrap_or_default())))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.limit => Err(Failure(format!("{detail}; over the {:?} limit", c.limit))),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(Failure(d)) => ("FAIL", d),
        };
        println!("[{tag}] {:>2} {:<26} {:>8.2} s  {detail}", c.id, c.name, elapsed.as_secs_f64());
        failed += outcome.is_err() as usize;
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// 1

fn storage_arithmetic() -> Outcome {
    let p = NMPattern::TWO_FOUR;
    for (dtype, per_group, dense) in [(DType::Fp16, 36u64, 64u64), (DType::Int8, 20, 32)] {
        for (rows, cols) in [(1, 4), (1, 8), (3, 16), (64, 256)] {
            let groups = (rows * cols / 4) as u64;
            ensure!(
                storage_bits_for(rows, cols, p, dtype) == per_group * groups,
                "{dtype} {rows}x{cols}: {} bits for {groups} groups",
                storage_bits_for(rows, cols, p, dtype)
            );
        }
        // Physical size of a compressed row of two groups: the index fields fill one byte exactly.
        let w = sparse24::gen::random_conforming(1, 8, dtype, p, &mut rng(1));
        let s = compress(&w, p)?;
        let physical = s.values().len() as u64 * dtype.bits() + s.meta().len() as u64 * 8;
        ensure!(physical == 2 * per_group, "{dtype}: two groups occupy {physical} bits");
        ensure!(storage_bits(&s) == physical, "{dtype}: storage_bits {} vs {physical}", storage_bits(&s));
        let saving = 1.0 - per_group as f64 / dense as f64;
        let expected = if dtype == DType::Fp16 { 0.4375 } else { 0.375 };
        ensure!(saving == expected, "{dtype}: saving {saving}");
    }
    Ok("FP16 2:4 group = 36 bits (43.75% saved), INT8 group = 20 bits (37.5% saved)".into())
}

// ---------------------------------------------------------------------------
// 2

/// Conforming matrix with awkward values: signed zeros, subnormals, extremes,
/// and groups holding fewer than `n` nonzeros.
fn tricky_conforming(rows: usize, cols: usize, dtype: DType, p: NMPattern, r: &mut ChaCha8Rng) -> DenseMatrix {
    let special: &[f64] = match dtype {
        DType::Int8 => &[0.0, 1.0, -1.0, 127.0, -128.0],
        DType::Fp16 => &[-0.0, 6.0e-8, -6.0e-5, 65504.0, -65504.0, 1.0],
        DType::Bf16 | DType::Tf32 | DType::Fp32 => &[-0.0, 1.0e-40, -1.2e-38, 3.0e38, -3.0e38, 1.0],
        DType::Int32 => &[0.0, 1.0, -1.0, 2.0e9, -2.0e9],
    };
    let mut v = vec![0.0; rows * cols];
    for row in 0..rows {
        for g in 0..cols / p.m() {
            let mut slots: Vec<usize> = (0..p.m()).collect();
            slots.shuffle(r);
            for &i in &slots[..r.random_range(0..=p.n())] {
                v[row * cols + g * p.m() + i] = if r.random_bool(0.2) {
                    special[r.random_range(0..special.len())]
                } else if dtype == DType::Int8 {
                    r.random_range(-128..=127) as f64
                } else {
                    r.random_range(-4.0..4.0)
                };
            }
        }
    }
    DenseMatrix::from_f64_rounded(rows, cols, dtype, &v).unwrap()
}

fn codec_roundtrip() -> Outcome {
    let mut r = rng(2);
    let dtypes = [DType::Fp32, DType::Tf32, DType::Fp16, DType::Bf16, DType::Int8];
    let patterns = [NMPattern::TWO_FOUR, NMPattern::ONE_TWO, NMPattern::new(4, 8)?, NMPattern::new(1, 4)?];
    let trials = 10_000;
    let mut elements = 0usize;
    for t in 0..trials {
        let dtype = dtypes[t % dtypes.len()];
        let p = patterns[r.random_range(0..patterns.len())];
        let rows = r.random_range(1..=128);
        let cols = p.m() * r.random_range(1..=256 / p.m());
        let w = tricky_conforming(rows, cols, dtype, p, &mut r);
        let back = decompress(&compress(&w, p)?);
        ensure!(back.bit_eq(&w), "trial {t}: {dtype} {p} {rows}x{cols} did not roundtrip");
        elements += rows * cols;
    }
    Ok(format!("{trials} matrices ({elements} elements), 5 dtypes, 4 patterns, bit-exact"))
}

// ---------------------------------------------------------------------------
// 3

/// Unit in the last place of `x` in `dtype`, from the format's precision and
/// smallest normal exponent.
fn ulp(dtype: DType, x: f64) -> f64 {
    let (mantissa, min_exp) = match dtype {
        DType::Fp32 => (23, -126),
        DType::Fp16 => (10, -14),
        _ => unreachable!("accumulators are fp32, fp16 or int32"),
    };
    let x = x.abs();
    let e = if x == 0.0 { min_exp } else { (x.log2().floor() as i32).max(min_exp) };
    2f64.powi(e - mantissa)
}

fn spmm_equivalence() -> Outcome {
    let mut r = rng(3);
    let formats = [
        NumericFormat::TF32,
        NumericFormat::FP16,
        NumericFormat::BF16,
        NumericFormat::FP16_ACC16,
        NumericFormat::INT8,
    ];
    let patterns = [NMPattern::TWO_FOUR, NMPattern::ONE_TWO];
    let cases = 1_000;
    let mut worst_ratio = 0.0f64;
    for case in 0..cases {
        let format = formats[case % formats.len()];
        let p = patterns[r.random_range(0..2)];
        let (m, n) = (r.random_range(1..=40), r.random_range(1..=40));
        let k = format.sparse_k_multiple().unwrap() * r.random_range(1..=8);
        let a_dense = sparse24::gen::random_conforming(m, k, format.input(), p, &mut r);
        let b = sparse24::gen::random_dense(k, n, format.input(), &mut r);
        let a = compress(&a_dense, p)?;
        let plan = SpmmPlan::new(
            r.random_range(1..=16),
            r.random_range(1..=64),
            p.m() * r.random_range(1..=16),
            if r.random_bool(0.5) { 0 } else { 1 },
        );
        let (c, macs) = spmm_counted(&a, &b, format, &plan)?;
        let half = GemmShape::new(m, n, k).dense_macs() / 2;
        ensure!(macs == half, "case {case}: {macs} multiply-adds for {m}x{n}x{k} {p}, expected {half}");

        if format == NumericFormat::INT8 {
            let oracle = gemm_dense(&decompress(&a), &b, format)?;
            ensure!(c.bit_eq(&oracle), "case {case}: INT8 {m}x{n}x{k} differs from the dense GEMM");
            // The dense GEMM itself against exact integer arithmetic.
            for i in 0..m {
                for j in 0..n {
                    let exact: i64 = (0..k).map(|t| a_dense.get_f64(i, t) as i64 * b.get_f64(t, j) as i64).sum();
                    ensure!(c.get_f64(i, j) as i64 == exact, "case {case}: c[{i},{j}] = {} vs {exact}", c.get_f64(i, j));
                }
            }
            continue;
        }
        for i in 0..m {
            for j in 0..n {
                let (mut exact, mut scale) = (0.0f64, 0.0f64);
                for t in 0..k {
                    let prod = a_dense.get_f64(i, t) * b.get_f64(t, j);
                    exact += prod;
                    scale += prod.abs();
                }
                let tol = 2.0 * k as f64 * ulp(format.accumulator(), scale);
                let err = (c.get_f64(i, j) - exact).abs();
                ensure!(err <= tol, "case {case}: {format} c[{i},{j}] off by {err:e}, tolerance {tol:e}");
                if tol > 0.0 {
                    worst_ratio = worst_ratio.max(err / tol);
                }
            }
        }
    }
    Ok(format!(
        "{cases} cases: INT8 bit-equal, float error <= {:.3} of 2*K*ulp, MACs = M*N*K/2 for 2:4 and 1:2",
        worst_ratio
    ))
}

// ---------------------------------------------------------------------------
// 4

fn fp16_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> DenseMatrix {
    // A small value pool makes magnitude ties common.
    let pool: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..rows * cols)
        .map(|_| if r.random_bool(0.3) { pool[r.random_range(0..pool.len())] } else { r.random_range(-1.0..1.0) })
        .collect();
    DenseMatrix::from_f64_rounded(rows, cols, DType::Fp16, &v).unwrap()
}

/// Best retained magnitude of one group of four over all C(4,2) pairs.
fn best_pair(g: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..4 {
        for j in i + 1..4 {
            best = best.max(g[i].abs() + g[j].abs());
        }
    }
    best
}

/// Every 4x4 0/1 mask with two ones in each row and each column.
fn doubly_two_of_four() -> Vec<u16> {
    (0u32..1 << 16)
        .map(|m| m as u16)
        .filter(|&m| {
            (0..4).all(|i| {
                let row = (0..4).filter(|&c| m >> (4 * i + c) & 1 == 1).count();
                let col = (0..4).filter(|&rr| m >> (4 * rr + i) & 1 == 1).count();
                row == 2 && col == 2
            })
        })
        .collect()
}

fn mask_optimality() -> Outcome {
    let mut r = rng(4);
    let p = NMPattern::TWO_FOUR;
    let (rows, cols) = (625, 64);
    let groups = rows * cols / 4;
    let w = fp16_matrix(rows, cols, &mut r);
    let res = prune_magnitude(&w, p)?;
    ensure!(res.mask.is_valid(p, Axis::Rows), "magnitude mask breaks 2:4");
    let mut oracle_total = 0.0;
    for row in 0..rows {
        for g in 0..cols / 4 {
            let vals: Vec<f64> = (0..4).map(|i| w.get_f64(row, g * 4 + i)).collect();
            let kept: Vec<usize> = (0..4).filter(|&i| res.mask.get(row, g * 4 + i)).collect();
            ensure!(kept.len() == 2, "group ({row},{g}) keeps {} values", kept.len());
            let got: f64 = kept.iter().map(|&i| vals[i].abs()).sum();
            let best = best_pair(&vals);
            ensure!(got == best, "group ({row},{g}) keeps {got}, best pair is {best}");
            oracle_total += best;
        }
    }
    ensure!(res.retained_magnitude == oracle_total, "total {} vs oracle {oracle_total}", res.retained_magnitude);

    let candidates = doubly_two_of_four();
    ensure!(candidates.len() == 90, "enumeration found {} tile masks", candidates.len());
    let tiles = 1_000;
    for t in 0..tiles {
        let tile = fp16_matrix(4, 4, &mut r);
        let res = find_transposable_mask(&tile, TransposableMode::Exhaustive)?;
        ensure!(res.mask.is_valid(p, Axis::Rows) && res.mask.is_valid(p, Axis::Cols), "tile {t}: mask not transposable");
        let best = candidates
            .iter()
            .map(|&m| (0..16).filter(|&b| m >> b & 1 == 1).map(|b| tile.get_f64(b / 4, b % 4).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        ensure!(res.retained_magnitude == best, "tile {t}: {} vs oracle {best}", res.retained_magnitude);
    }
    Ok(format!("{groups} groups match C(4,2) enumeration; {tiles} tiles match the 90-mask enumeration"))
}

// ---------------------------------------------------------------------------
// 5

/// Magnitude kept by the best 2:4 mask of `w` with columns read in `order`.
fn retained_2of4(w: &DenseMatrix, order: &[usize]) -> f64 {
    let mut total = 0.0;
    for row in 0..w.rows() {
        for g in order.chunks(4) {
            let vals: Vec<f64> = g.iter().map(|&c| w.get_f64(row, c)).collect();
            total += best_pair(&vals);
        }
    }
    total
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

fn permutation_search() -> Outcome {
    let mut r = rng(5);
    let p = NMPattern::TWO_FOUR;
    let perms = all_permutations(8);
    let partitions: BTreeSet<Vec<Vec<usize>>> = perms
        .iter()
        .map(|o| {
            let mut groups: Vec<Vec<usize>> = o.chunks(4).map(|g| {
                let mut g = g.to_vec();
                g.sort();
                g
            }).collect();
            groups.sort();
            groups
        })
        .collect();
    ensure!(partitions.len() == 35, "8 columns form {} distinct partitions", partitions.len());

    let exhaustive = 20;
    for t in 0..exhaustive {
        let w = fp16_matrix(8, 8, &mut r);
        let s = find_permutation(&w, p, SearchBudget::Exhaustive)?;
        ensure!(s.partitions_visited == 35, "matrix {t}: visited {} partitions", s.partitions_visited);
        let best = perms.iter().map(|o| retained_2of4(&w, o)).fold(0.0, f64::max);
        let got = retained_2of4(&w, s.permutation.as_slice());
        ensure!(got == best, "matrix {t}: exhaustive keeps {got}, enumeration {best}");
        ensure!(s.result.retained_magnitude == best, "matrix {t}: reported {}", s.result.retained_magnitude);
    }

    let greedy = 1_000;
    let mut improved = 0;
    for t in 0..greedy {
        let w = fp16_matrix(8, 8, &mut r);
        let s = find_permutation(&w, p, SearchBudget::greedy(t))?;
        let identity = retained_2of4(&w, &(0..8).collect::<Vec<_>>());
        let got = retained_2of4(&w, s.permutation.as_slice());
        ensure!(got >= identity, "matrix {t}: greedy keeps {got} < identity {identity}");
        ensure!(s.result.retained_magnitude == got, "matrix {t}: reported {} vs {got}", s.result.retained_magnitude);
        improved += (got > identity) as usize;
    }
    Ok(format!(
        "exhaustive visits 35 partitions and matches 8! enumeration on {exhaustive} matrices; greedy >= identity on {greedy} (better on {improved})"
    ))
}

// ---------------------------------------------------------------------------
// 6

/// `relu(h)`, requantized to INT8 by an arithmetic right shift, saturating.
fn relu_requant(h: &DenseMatrix, shift: u32) -> DenseMatrix {
    let v: Vec<f64> = h.to_f64_vec().iter().map(|&x| ((x.max(0.0) as i64) >> shift).min(127) as f64).collect();
    DenseMatrix::from_f64_rounded(h.rows(), h.cols(), DType::Int8, &v).unwrap()
}

fn relu_round(h: &DenseMatrix, dtype: DType) -> DenseMatrix {
    let v: Vec<f64> = h.to_f64_vec().iter().map(|&x| x.max(0.0)).collect();
    DenseMatrix::from_f64_rounded(h.rows(), h.cols(), dtype, &v).unwrap()
}

fn permutation_correctness() -> Outcome {
    let mut r = rng(6);
    let nets = 100;
    let mut worst_ulps = 0.0f64;
    for t in 0..nets {
        let (inputs, hidden, outputs, batch) = (32, 4 * r.random_range(2..=8), r.random_range(1..=16), 8);
        let integer = t % 2 == 0;
        let (format, dtype) = if integer { (NumericFormat::INT8, DType::Int8) } else { (NumericFormat::FP16, DType::Fp16) };
        let w1 = sparse24::gen::random_dense(hidden, inputs, dtype, &mut r);
        let w2 = sparse24::gen::random_dense(outputs, hidden, dtype, &mut r);
        let x = sparse24::gen::random_dense(inputs, batch, dtype, &mut r);
        let forward = |w1: &DenseMatrix, w2: &DenseMatrix| -> sparse24::Result<(DenseMatrix, DenseMatrix)> {
            let h = gemm_dense(w1, &x, format)?;
            let h = if integer { relu_requant(&h, 7) } else { relu_round(&h, dtype) };
            Ok((gemm_dense(w2, &h, format)?, h))
        };
        let (y, h) = forward(&w1, &w2)?;

        let perm = if t % 4 < 2 {
            let mut v: Vec<usize> = (0..hidden).collect();
            v.shuffle(&mut r);
            Permutation::new(v)?
        } else {
            find_permutation(&w2, NMPattern::TWO_FOUR, SearchBudget::greedy(t as u64))?.permutation
        };
        let w2p = perm.apply_columns(&w2)?;
        let w1p = propagate_permutation(&w1, &perm)?;
        let (yp, _) = forward(&w1p, &w2p)?;

        if integer {
            ensure!(yp.bit_eq(&y), "net {t}: integer output changed after permutation");
            continue;
        }
        for i in 0..outputs {
            for j in 0..batch {
                // Reordering a sum of `hidden` terms moves each rounded result by at
                // most (hidden - 1) accumulator ulps of the absolute sum.
                let scale: f64 = (0..hidden).map(|c| (w2.get_f64(i, c) * h.get_f64(c, j)).abs()).sum();
                let unit = ulp(DType::Fp32, scale);
                let diff = (yp.get_f64(i, j) - y.get_f64(i, j)).abs();
                let tol = 2.0 * (hidden - 1) as f64 * unit;
                ensure!(diff <= tol, "net {t}: y[{i},{j}] moved by {diff:e}, tolerance {tol:e}");
                worst_ulps = worst_ulps.max(diff / unit);
            }
        }
    }
    Ok(format!(
        "{nets} two-layer nets: INT8 bit-exact, FP16/FP32 moved at most {worst_ulps:.0} accumulator ulp (bound 2*(K-1))"
    ))
}

// ---------------------------------------------------------------------------
// 7

fn workflow_demo() -> Outcome {
    let recipe = Recipe::parse(REFERENCE_RECIPE)?;
    let report = recipe.run()?;
    let gap = (report.dense_test_accuracy - report.final_test_accuracy) * 100.0;
    ensure!(report.masked_weights_stayed_zero, "report: masked weights became nonzero");

    // The same pipeline by hand, watching the masks after every optimizer step.
    let (train_set, test_set) = recipe.dataset.generate()?;
    let mut sizes = vec![recipe.dataset.features];
    sizes.extend(&recipe.hidden);
    sizes.push(recipe.dataset.classes);
    let mut net = TinyNet::new(&sizes, recipe.seed)?;
    let schedule = recipe.schedules["main"];
    train(&mut net, &train_set, &schedule)?;
    let dense = net.accuracy(&test_set);
    let masks: Vec<Mask> = net
        .layers()
        .iter()
        .map(|l| prune_magnitude(&l.weight_matrix(), NMPattern::TWO_FOUR).map(|r| r.mask))
        .collect::<sparse24::Result<_>>()?;
    let (mut steps, mut leaks) = (0usize, 0usize);
    retrain_sparse(&mut net, &masks, &train_set, &schedule, &mut |n: &TinyNet| {
        steps += 1;
        for (l, m) in n.layers().iter().zip(&masks) {
            leaks += l.weights.iter().zip(m.bits()).filter(|(w, keep)| !**keep && **w != 0.0).count();
        }
    })?;
    let sparse = net.accuracy(&test_set);
    ensure!(leaks == 0, "{leaks} masked weights nonzero over {steps} steps");
    ensure!(steps > 0, "the observer never ran");
    ensure!(dense == report.dense_test_accuracy && sparse == report.final_test_accuracy, "recipe and manual runs disagree");
    ensure!(gap <= 1.0, "dense {:.2}% vs sparse {:.2}%: gap {gap:.2} points", dense * 100.0, sparse * 100.0);
    Ok(format!(
        "dense {:.2}% -> 2:4 retrained {:.2}% (gap {gap:.2} points), masked weights zero after all {steps} steps",
        dense * 100.0,
        sparse * 100.0
    ))
}

// ---------------------------------------------------------------------------
// 8

fn gradient_check() -> Outcome {
    let mut r = rng(8);
    let nets = 20;
    let h = 1e-3;
    let mut worst = 0.0f64;
    for t in 0..nets {
        let sizes = [r.random_range(3..=5), r.random_range(3..=5), r.random_range(2..=3)];
        let mut net = TinyNet::new(&sizes, 100 + t)?;
        for l in net.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
        }
        let examples = 6;
        let data = Dataset {
            features: sizes[0],
            classes: sizes[2],
            x: (0..examples * sizes[0]).map(|_| r.random_range(-2.0..2.0)).collect(),
            y: (0..examples).map(|_| r.random_range(0..sizes[2])).collect(),
        };
        let batch: Vec<usize> = (0..examples).collect();
        let (_, grads) = net.loss_and_gradients(&data, &batch);
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.weights.iter().chain(&g.bias).copied()).collect();

        let mut numeric = Vec::with_capacity(analytic.len());
        for li in 0..net.layers().len() {
            let nw = net.layers()[li].weights.len();
            let nb = net.layers()[li].bias.len();
            for idx in 0..nw + nb {
                let probe = |net: &mut TinyNet, delta: f64| {
                    let l = &mut net.layers_mut()[li];
                    let p = if idx < nw { &mut l.weights[idx] } else { &mut l.bias[idx - nw] };
                    *p += delta;
                };
                probe(&mut net, h);
                let up = net.loss(&data, &batch);
                probe(&mut net, -2.0 * h);
                let down = net.loss(&data, &batch);
                probe(&mut net, h);
                numeric.push((up - down) / (2.0 * h));
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(f64::MIN_POSITIVE);
        ensure!(rel <= 1e-4, "net {t} {sizes:?}: relative error {rel:e}");
        worst = worst.max(rel);
    }
    Ok(format!("{nets} nets, worst norm-wise relative error {worst:.2e} (step {h})"))
}

// ---------------------------------------------------------------------------
// 9

fn bench_trend() -> Outcome {
    let sizes: Vec<GemmShape> = [64, 1024, 2048].iter().map(|&k| GemmShape::new(256, 256, k)).collect();
    let mut cfg = BenchConfig::new(NumericFormat::FP16);
    cfg.repeats = 9;
    let report = bench(&sizes, &cfg)?;
    for row in &report.rows {
        ensure!(row.flops_ratio == 2.0, "{}: flops_ratio {}", row.shape, row.flops_ratio);
    }
    let small = report.rows.iter().find(|r| r.shape.k == 64).unwrap().speedup;
    let summary: Vec<String> = report.rows.iter().map(|r| format!("K={} {:.3}x", r.shape.k, r.speedup)).collect();
    for row in report.rows.iter().filter(|r| r.shape.k >= 1024) {
        ensure!(row.speedup > small, "speedup does not grow with K: {}", summary.join(", "));
    }
    Ok(format!("flops_ratio 2.0; speedup {}", summary.join(", ")))
}

// ---------------------------------------------------------------------------
// 10

fn random_stream(r: &mut ChaCha8Rng) -> Vec<DenseMatrix> {
    let (rows, cols) = (r.random_range(1..=8), r.random_range(1..=32));
    let scale = 10f64.powi(r.random_range(-3..=3));
    (0..r.random_range(1..=4))
        .map(|_| {
            let v: Vec<f64> = (0..rows * cols)
                .map(|_| {
                    let x = r.random_range(-1.0..1.0) * scale;
                    if r.random_bool(0.02) { x * 50.0 } else { x }
                })
                .collect();
            DenseMatrix::from_f64_rounded(rows, cols, DType::Fp32, &v).unwrap()
        })
        .collect()
}

fn random_granularity(r: &mut ChaCha8Rng) -> Granularity {
    [Granularity::PerTensor, Granularity::PerChannel, Granularity::PerRow][r.random_range(0..3)]
}

/// KL(P || Q) for the first `kept` bins, written out from the definition.
fn oracle_divergence(counts: &[u64], kept: usize, levels: usize) -> f64 {
    let tail: u64 = counts[kept..].iter().sum();
    let mut p: Vec<f64> = counts[..kept].iter().map(|&c| c as f64).collect();
    p[kept - 1] += tail as f64;
    let mut q = vec![0.0; kept];
    let mut q_mass = 0u64;
    for l in 0..levels {
        let (lo, hi) = (l * kept / levels, (l + 1) * kept / levels);
        let mass: u64 = counts[lo..hi].iter().sum();
        let nonempty = counts[lo..hi].iter().filter(|&&c| c > 0).count();
        for b in lo..hi {
            if counts[b] > 0 {
                q[b] = mass as f64 / nonempty as f64;
            }
        }
        q_mass += mass;
    }
    // Normalizers taken from integer totals, so they are exact.
    let (ps, qs) = (p.iter().sum::<f64>(), q_mass as f64);
    let mut kl = 0.0;
    for i in 0..kept {
        if p[i] > 0.0 {
            if q[i] == 0.0 {
                return f64::INFINITY;
            }
            kl += p[i] / ps * ((p[i] / ps) / (q[i] / qs)).ln();
        }
    }
    kl
}

fn synthetic_samples(kind: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    use rand_distr::{Distribution, Exp, Normal};
    let n = 20_000;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let exp = Exp::new(1.0).unwrap();
    let mut v: Vec<f64> = match kind % 5 {
        0 => (0..n).map(|_| normal.sample(r)).collect(),
        1 => (0..n).map(|_| exp.sample(r) * if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
        2 => (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
        // Two spikes.
        3 => (0..n).map(|_| if r.random_bool(0.7) { 0.1 } else { 2.0 } + 0.01 * normal.sample(r)).collect(),
        _ => (0..n).map(|_| normal.sample(r) * normal.sample(r)).collect(),
    };
    let outliers = r.random_range(0..20);
    for _ in 0..outliers {
        v.push(r.random_range(10.0..60.0));
    }
    v
}

fn quantization() -> Outcome {
    let mut r = rng(10);
    let streams = 1_000;
    for t in 0..streams {
        let stream = random_stream(&mut r);
        let g = random_granularity(&mut r);
        let scales = calibrate(&stream, CalibMethod::Max, g)?;
        for x in &stream {
            let q = quantize(x, &scales)?;
            for i in 0..x.rows() {
                let s = scales.for_row(i);
                for j in 0..x.cols() {
                    let (v, qi) = (x.get_f64(i, j), q.get_f64(i, j));
                    ensure!(qi.abs() <= 127.0, "stream {t}: {v} quantized to {qi}");
                    ensure!((qi * s - v).abs() <= 0.5 * s * (1.0 + 1e-9), "stream {t} {g:?}: {v} clipped to {}", qi * s);
                }
            }
        }
    }

    let trials = 10_000;
    for t in 0..trials {
        let (rows, cols) = (r.random_range(1..=8), 4 * r.random_range(1..=8));
        let scale = 10f64.powi(r.random_range(-3..=3));
        let v: Vec<f64> = (0..rows * cols).map(|_| r.random_range(-1.0..1.0) * scale).collect();
        let x = DenseMatrix::from_f64_rounded(rows, cols, DType::Fp32, &v)?;
        let pruned = apply_mask(&x, &prune_magnitude(&x, NMPattern::TWO_FOUR)?.mask)?;
        let method = match t % 3 {
            0 => CalibMethod::Max,
            1 => CalibMethod::Entropy,
            _ => CalibMethod::Percentile(r.random_range(50.0..100.0)),
        };
        let scales = calibrate(std::slice::from_ref(&pruned), method, random_granularity(&mut r))?;
        let q = quantize(&pruned, &scales)?;
        ensure!(check_conformance(&q, NMPattern::TWO_FOUR)?, "trial {t}: quantized {rows}x{cols} tensor breaks 2:4");
    }

    let histograms = 100;
    let bins = sparse24::quant::HISTOGRAM_BINS;
    let levels = sparse24::quant::QUANT_LEVELS;
    let mut clipped = 0;
    for t in 0..histograms {
        let samples = synthetic_samples(t, &mut r);
        let x = DenseMatrix::from_f64_rounded(1, samples.len(), DType::Fp32, &samples)?;
        // The oracle sees the fp32-rounded samples the library sees.
        let v = x.to_f64_vec();
        let amax = v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        let mut counts = vec![0u64; bins];
        for &x in &v {
            counts[((x.abs() / amax * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let mut best = (f64::INFINITY, bins);
        for kept in levels..=bins {
            let d = oracle_divergence(&counts, kept, levels);
            if d < best.0 {
                best = (d, kept);
            }
        }
        let hist = Histogram::from_counts(amax, counts);
        ensure!(hist.entropy_bins() == best.1, "histogram {t}: {} bins kept, oracle {}", hist.entropy_bins(), best.1);
        let scales = calibrate(&[x], CalibMethod::Entropy, Granularity::PerTensor)?;
        let expected = best.1 as f64 * (amax / bins as f64) / 127.0;
        ensure!(scales.scales()[0] == expected, "histogram {t}: scale {} vs oracle {expected}", scales.scales()[0]);
        clipped += (best.1 < bins) as usize;
    }
    Ok(format!(
        "max never clips on {streams} streams; {trials} pruned tensors stay 2:4 after INT8; entropy matches the KL scan on {histograms} histograms ({clipped} clipped)"
    ))
}
