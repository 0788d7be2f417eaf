//! `sparse24` command-line tool. Data goes to stdout, diagnostics to stderr.
//!
//! Exit codes: 0 success, 1 invalid data, 2 usage error, 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparse24::archive::{ArchiveError, Tensor, TensorArchive};
use sparse24::codec::first_violation;
use sparse24::pruner::{
    apply_mask, find_permutation, find_transposable_mask, prune_magnitude, SearchBudget, TransposableMode,
};
use sparse24::quant::{calibrate, quantize, CalibMethod, Granularity};
use sparse24::spmm::{bench, BenchConfig};
use sparse24::workflow::Recipe;
use sparse24::{compress, decompress, gen, spmm, DType, DenseMatrix, Error, GemmShape, NMPattern, NumericFormat, SpmmPlan};

#[derive(Parser)]
#[command(name = "sparse24", version, about = "N:M structured sparsity tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random dense matrix, optionally already N:M conforming.
    Generate {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value = "fp16")]
        dtype: DType,
        /// Make the matrix conform to this pattern.
        #[arg(long)]
        pattern: Option<NMPattern>,
        #[arg(long, default_value = "w")]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compress dense entries that conform to the pattern.
    Compress {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "2:4")]
        pattern: NMPattern,
        /// Only this entry (default: every dense entry).
        #[arg(long)]
        entry: Option<String>,
    },
    /// Expand sparse entries back to dense.
    Decompress {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        entry: Option<String>,
    },
    /// Check that dense entries conform to the pattern.
    Check {
        input: PathBuf,
        #[arg(long, default_value = "2:4")]
        pattern: NMPattern,
        #[arg(long)]
        entry: Option<String>,
    },
    /// Prune a dense entry. Writes the pruned weights, `<name>.mask` and, when
    /// permuting, `<name>.perm` (output column j holds input column perm[j]).
    Prune {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "2:4")]
        pattern: NMPattern,
        #[arg(long, value_enum, default_value_t = Search::Off)]
        permute: Search,
        /// Mask valid along rows and columns (2:4 only).
        #[arg(long, value_enum, default_value_t = Search::Off)]
        transposable: Search,
        #[arg(long)]
        entry: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// C = A x B with A a sparse entry and B a dense entry; writes entry `c`.
    Spmm {
        a: PathBuf,
        b: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        a_entry: Option<String>,
        #[arg(long)]
        b_entry: Option<String>,
        /// Format pair, e.g. `fp16` or `fp16/fp16` (default: from A's dtype).
        #[arg(long)]
        format: Option<NumericFormat>,
        /// Worker threads (0 = all available, 1 = sequential).
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Calibrate INT8 scales over the dense entries (one stream of samples).
    Calibrate {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// `max`, `entropy`, `percentile` or `percentile=P`.
        #[arg(long, default_value = "max")]
        method: CalibMethod,
        #[arg(long, default_value = "per-tensor")]
        granularity: Granularity,
        /// Also write each entry quantized to INT8 as `<name>.q`.
        #[arg(long)]
        quantize: bool,
        #[arg(long)]
        entry: Option<String>,
    },
    /// Time dense vs sparse GEMM; CSV on stdout.
    Bench {
        /// Comma-separated MxNxK shapes.
        #[arg(long, value_delimiter = ',', default_value = "256x256x64,256x256x256,256x256x1024,256x256x2048")]
        sizes: Vec<GemmShape>,
        #[arg(long, default_value = "fp16")]
        format: NumericFormat,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a recipe on the synthetic task; JSON report on stdout.
    DemoWorkflow {
        #[arg(long)]
        recipe: PathBuf,
        /// Override the recipe's network seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the entries of an archive.
    Info { input: PathBuf },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Search {
    Off,
    Greedy,
    Exhaustive,
}

enum Failure {
    Usage(String),
    Data(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Archive(ArchiveError::Io(io)) => Failure::Io(io.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<ArchiveError> for Failure {
    fn from(e: ArchiveError) -> Self {
        Error::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("i/o error: {m}");
            ExitCode::from(3)
        }
    }
}

fn read(path: &Path) -> Result<TensorArchive, Failure> {
    TensorArchive::read(path).map_err(|e| match e {
        ArchiveError::Io(io) => Failure::Io(format!("{}: {io}", path.display())),
        other => Failure::Data(format!("{}: {other}", path.display())),
    })
}

fn write(archive: &TensorArchive, path: &Path) -> Outcome {
    archive.write(path).map_err(|e| match e {
        ArchiveError::Io(io) => Failure::Io(format!("{}: {io}", path.display())),
        other => Failure::Data(other.to_string()),
    })
}

/// Names of entries matching `wanted` (or all of `kind` when `wanted` is None).
fn selected(archive: &TensorArchive, wanted: Option<&str>, kind: &str) -> Result<Vec<String>, Failure> {
    let names: Vec<String> = archive
        .entries
        .iter()
        .filter(|e| e.tensor.kind_name() == kind && wanted.is_none_or(|w| w == e.name))
        .map(|e| e.name.clone())
        .collect();
    if names.is_empty() {
        return Err(Failure::Data(match wanted {
            Some(w) => format!("no {kind} entry named '{w}'"),
            None => format!("archive has no {kind} entries"),
        }));
    }
    Ok(names)
}

fn dense<'a>(archive: &'a TensorArchive, name: &str) -> &'a DenseMatrix {
    match archive.get(name) {
        Some(Tensor::Dense(m)) => m,
        _ => unreachable!("selected() only returns dense entries"),
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Generate { rows, cols, dtype, pattern, name, seed, output } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = match pattern {
                Some(p) => {
                    p.check_divides(cols)?;
                    gen::random_conforming(rows, cols, dtype, p, &mut rng)
                }
                None => gen::random_dense(rows, cols, dtype, &mut rng),
            };
            let mut a = TensorArchive::new();
            a.push(name, Tensor::Dense(m));
            write(&a, &output)
        }
        Command::Compress { input, output, pattern, entry } => {
            let mut a = read(&input)?;
            for name in selected(&a, entry.as_deref(), "dense")? {
                let s = compress(dense(&a, &name), pattern).map_err(|e| Failure::Data(format!("entry '{name}': {e}")))?;
                replace(&mut a, &name, Tensor::Sparse(s));
            }
            write(&a, &output)
        }
        Command::Decompress { input, output, entry } => {
            let mut a = read(&input)?;
            for name in selected(&a, entry.as_deref(), "sparse")? {
                let Some(Tensor::Sparse(s)) = a.get(&name) else { unreachable!() };
                let d = decompress(s);
                replace(&mut a, &name, Tensor::Dense(d));
            }
            write(&a, &output)
        }
        Command::Check { input, pattern, entry } => {
            let a = read(&input)?;
            for name in selected(&a, entry.as_deref(), "dense")? {
                if let Some((row, group, nonzeros)) = first_violation(dense(&a, &name), pattern)? {
                    return Err(Failure::Data(format!(
                        "entry '{name}' does not conform to {pattern}: row {row}, group {group} has {nonzeros} nonzeros (at most {} allowed)",
                        pattern.n()
                    )));
                }
                println!("{name}: conforms to {pattern}");
            }
            Ok(())
        }
        Command::Prune { input, output, pattern, permute, transposable, entry, seed } => {
            if transposable != Search::Off && pattern != NMPattern::TWO_FOUR {
                return Err(Failure::Usage("--transposable requires --pattern 2:4".into()));
            }
            let mut a = read(&input)?;
            for name in selected(&a, entry.as_deref(), "dense")? {
                let mut w = dense(&a, &name).clone();
                let total: f64 = w.to_f64_vec().iter().map(|v| v.abs()).sum();
                if permute != Search::Off {
                    let budget = match permute {
                        Search::Exhaustive => SearchBudget::Exhaustive,
                        _ => SearchBudget::greedy(seed),
                    };
                    let search = find_permutation(&w, pattern, budget)?;
                    eprintln!(
                        "{name}: permutation keeps {:.6} vs {:.6} unpermuted",
                        search.result.retained_magnitude, search.baseline.retained_magnitude
                    );
                    w = search.permutation.apply_columns(&w)?;
                    let perm: Vec<i32> = search.permutation.as_slice().iter().map(|&p| p as i32).collect();
                    a.push(format!("{name}.perm"), Tensor::Dense(DenseMatrix::from_i32(1, perm.len(), perm)?));
                }
                let result = match transposable {
                    Search::Off => prune_magnitude(&w, pattern)?,
                    Search::Greedy => find_transposable_mask(&w, TransposableMode::Greedy)?,
                    Search::Exhaustive => find_transposable_mask(&w, TransposableMode::Exhaustive)?,
                };
                let kept = if total > 0.0 { result.retained_magnitude / total } else { 1.0 };
                eprintln!("{name}: kept {:.2}% of weight magnitude", 100.0 * kept);
                let pruned = apply_mask(&w, &result.mask)?;
                replace(&mut a, &name, Tensor::Dense(pruned));
                a.push(format!("{name}.mask"), Tensor::Mask(result.mask));
            }
            write(&a, &output)
        }
        Command::Spmm { a, b, output, a_entry, b_entry, format, threads } => {
            let aa = read(&a)?;
            let ba = read(&b)?;
            let an = &selected(&aa, a_entry.as_deref(), "sparse")?[0];
            let bn = &selected(&ba, b_entry.as_deref(), "dense")?[0];
            let Some(Tensor::Sparse(sa)) = aa.get(an) else { unreachable!() };
            let format = match format {
                Some(f) => f,
                None => NumericFormat::for_input(sa.dtype())?,
            };
            let plan = SpmmPlan { threads, ..SpmmPlan::default() };
            let c = spmm(sa, dense(&ba, bn), format, &plan)?;
            let mut out = TensorArchive::new();
            out.push("c", Tensor::Dense(c));
            write(&out, &output)
        }
        Command::Calibrate { input, output, method, granularity, quantize: q, entry } => {
            let mut a = read(&input)?;
            let names = selected(&a, entry.as_deref(), "dense")?;
            let stream: Vec<DenseMatrix> = names.iter().map(|n| dense(&a, n).clone()).collect();
            let scales = calibrate(&stream, method, granularity)?;
            if q {
                for (name, m) in names.iter().zip(&stream) {
                    a.push(format!("{name}.q"), Tensor::Dense(quantize(m, &scales)?));
                }
            }
            eprintln!("calibrated {} scale(s) over {} sample(s)", scales.scales().len(), stream.len());
            a.push("scales", Tensor::Scales(scales));
            write(&a, &output)
        }
        Command::Bench { sizes, format, repeats, threads, seed } => {
            let mut cfg = BenchConfig::new(format);
            cfg.repeats = repeats;
            cfg.seed = seed;
            cfg.plan.threads = threads;
            let report = bench(&sizes, &cfg)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::DemoWorkflow { recipe, seed } => {
            let text = std::fs::read_to_string(&recipe)
                .map_err(|e| Failure::Io(format!("{}: {e}", recipe.display())))?;
            let mut r = Recipe::parse(&text)?;
            if let Some(s) = seed {
                r.seed = s;
            }
            let report = r.run()?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Data(e.to_string()))?;
            println!("{json}");
            Ok(())
        }
        Command::Info { input } => {
            let a = read(&input)?;
            for e in &a.entries {
                let detail = match &e.tensor {
                    Tensor::Dense(m) => format!("{} {}x{}", m.dtype(), m.rows(), m.cols()),
                    Tensor::Sparse(s) => format!("{} {}x{} {}", s.dtype(), s.rows(), s.cols(), s.pattern()),
                    Tensor::Scales(s) => format!("{:?} x{}", s.granularity(), s.scales().len()),
                    Tensor::Mask(m) => format!("{}x{} kept {}", m.rows(), m.cols(), m.kept()),
                };
                println!("{}\t{}\t{detail}", e.name, e.tensor.kind_name());
            }
            Ok(())
        }
    }
}

fn replace(archive: &mut TensorArchive, name: &str, tensor: Tensor) {
    if let Some(e) = archive.entries.iter_mut().find(|e| e.name == name) {
        e.tensor = tensor;
    }
}
