//! Symmetric INT8 quantization: scale calibration and quantized sparse GEMM.
//!
//! A scale maps reals to integers by `q = clamp(round_ties_even(x / scale), -128, 127)`.
//! There is no zero point, so zero always maps to zero and quantizing a
//! pruned tensor keeps its sparsity pattern.
//!
//! Weight matrices are laid out with one output channel (conv) or one output
//! neuron (fully connected) per row, so per-channel and per-row scales both
//! index rows; the granularity tag records which policy produced them.

use crate::codec::SparseNM;
use crate::error::{Error, Result};
use crate::par;
use crate::spmm::{spmm, SpmmPlan};
use crate::tensor::{DType, DenseMatrix, NumericFormat};

/// Default percentile for [`CalibMethod::Percentile`].
pub const DEFAULT_PERCENTILE: f64 = 99.99;
/// Histogram resolution used by entropy calibration.
pub const HISTOGRAM_BINS: usize = 2048;
/// Number of positive quantized levels the clipped histogram is folded into.
pub const QUANT_LEVELS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    PerTensor,
    /// One scale per convolution output channel (weight matrix row).
    PerChannel,
    /// One scale per fully-connected weight row.
    PerRow,
}

impl Granularity {
    pub fn tag(self) -> u8 {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => 1,
            Granularity::PerRow => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        [Granularity::PerTensor, Granularity::PerChannel, Granularity::PerRow].into_iter().find(|g| g.tag() == tag)
    }

    fn slices(self, rows: usize) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerChannel | Granularity::PerRow => rows,
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "per-tensor" | "tensor" => Ok(Granularity::PerTensor),
            "per-channel" | "channel" => Ok(Granularity::PerChannel),
            "per-row" | "row" => Ok(Granularity::PerRow),
            _ => Err(Error::Parse(format!("unknown granularity '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibMethod {
    Max,
    /// KL-divergence minimisation over a [`HISTOGRAM_BINS`]-bin histogram of `|x|`.
    Entropy,
    /// Nearest-rank percentile of `|x|`, `p` in `(0, 100]`.
    Percentile(f64),
}

impl std::str::FromStr for CalibMethod {
    type Err = Error;

    /// `max`, `entropy`, `percentile` or `percentile=P`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.split_once('=') {
            None if s == "max" => Ok(CalibMethod::Max),
            None if s == "entropy" => Ok(CalibMethod::Entropy),
            None if s == "percentile" => Ok(CalibMethod::Percentile(DEFAULT_PERCENTILE)),
            Some(("percentile", p)) => {
                let p: f64 = p.parse().map_err(|_| Error::Parse(format!("bad percentile '{p}'")))?;
                check_percentile(p)?;
                Ok(CalibMethod::Percentile(p))
            }
            _ => Err(Error::Parse(format!("unknown calibration method '{s}'"))),
        }
    }
}

fn check_percentile(p: f64) -> Result<()> {
    if p > 0.0 && p <= 100.0 {
        Ok(())
    } else {
        Err(Error::InvalidPercentile(p))
    }
}

/// Positive scales at a given granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet {
    granularity: Granularity,
    scales: Vec<f64>,
}

impl ScaleSet {
    pub fn new(granularity: Granularity, scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() || (granularity == Granularity::PerTensor && scales.len() != 1) {
            return Err(Error::GranularityMismatch(format!(
                "{granularity:?} with {} scales",
                scales.len()
            )));
        }
        if let Some(bad) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::GranularityMismatch(format!("scale {bad} is not positive and finite")));
        }
        Ok(ScaleSet { granularity, scales })
    }

    pub fn per_tensor(scale: f64) -> Result<Self> {
        Self::new(Granularity::PerTensor, vec![scale])
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Scale applying to row `r`.
    pub fn for_row(&self, r: usize) -> f64 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            _ => self.scales[r],
        }
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if self.scales.len() != self.granularity.slices(rows) {
            return Err(Error::GranularityMismatch(format!(
                "{} {:?} scales for a matrix with {rows} rows",
                self.scales.len(),
                self.granularity
            )));
        }
        Ok(())
    }
}

/// Histogram of `|x|` over `[0, range]`. Values at or above `range` land in
/// the last bin. Histograms with equal range and bin count merge by adding
/// counts, so partial histograms can be combined in any order.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    range: f64,
    counts: Vec<u64>,
}

impl Histogram {
    pub fn new(range: f64, bins: usize) -> Self {
        Histogram { range, counts: vec![0; bins.max(1)] }
    }

    pub fn from_counts(range: f64, counts: Vec<u64>) -> Self {
        Histogram { range, counts }
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn bin_width(&self) -> f64 {
        self.range / self.counts.len() as f64
    }

    pub fn add(&mut self, x: f64) {
        let bins = self.counts.len();
        let b = if self.range > 0.0 { (x.abs() / self.range * bins as f64) as usize } else { 0 };
        self.counts[b.min(bins - 1)] += 1;
    }

    pub fn extend<I: IntoIterator<Item = f64>>(&mut self, xs: I) {
        for x in xs {
            self.add(x);
        }
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.range != other.range || self.counts.len() != other.counts.len() {
            return Err(Error::GranularityMismatch(format!(
                "cannot merge histograms over [0, {}] x {} and [0, {}] x {}",
                self.range,
                self.counts.len(),
                other.range,
                other.counts.len()
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// KL divergence between the histogram clipped to its first `kept` bins
    /// (outliers folded into the last kept bin) and those `kept` bins without
    /// the outliers, quantized to [`QUANT_LEVELS`] levels. Each level spreads
    /// its mass evenly over the bins of its span that were non-empty. Infinite
    /// when the quantized distribution misses mass the reference has.
    pub fn clip_divergence(&self, kept: usize) -> f64 {
        Prefix::new(&self.counts).divergence(kept)
    }

    /// Number of bins kept by entropy calibration: the `kept` in
    /// `QUANT_LEVELS..=bins` with the smallest [`Histogram::clip_divergence`],
    /// the smallest such `kept` on ties. Histograms with fewer bins than
    /// levels are never clipped.
    pub fn entropy_bins(&self) -> usize {
        let bins = self.counts.len();
        if bins <= QUANT_LEVELS {
            return bins;
        }
        let prefix = Prefix::new(&self.counts);
        let divergences = par::map_range(bins - QUANT_LEVELS + 1, |i| prefix.divergence(QUANT_LEVELS + i));
        let mut best = (f64::INFINITY, bins);
        for (i, d) in divergences.into_iter().enumerate() {
            if d < best.0 {
                best = (d, QUANT_LEVELS + i);
            }
        }
        best.1
    }

    /// Clip threshold chosen by entropy calibration, the upper edge of the last kept bin.
    pub fn entropy_threshold(&self) -> f64 {
        self.entropy_bins() as f64 * self.bin_width()
    }
}

/// Running sums over histogram bins, so one clip candidate costs
/// `O(levels + occupied bins)` rather than `O(bins)`.
struct Prefix<'a> {
    counts: &'a [u64],
    /// `mass[i]`: total count of bins `..i`.
    mass: Vec<u64>,
    /// `occupied[i]`: non-empty bins among `..i`.
    occupied: Vec<usize>,
    nonempty: Vec<usize>,
}

impl<'a> Prefix<'a> {
    fn new(counts: &'a [u64]) -> Self {
        let mut mass = Vec::with_capacity(counts.len() + 1);
        let mut occupied = Vec::with_capacity(counts.len() + 1);
        let (mut m, mut o) = (0u64, 0usize);
        mass.push(0);
        occupied.push(0);
        for &c in counts {
            m += c;
            o += (c != 0) as usize;
            mass.push(m);
            occupied.push(o);
        }
        let nonempty = (0..counts.len()).filter(|&i| counts[i] != 0).collect();
        Prefix { counts, mass, occupied, nonempty }
    }

    fn divergence(&self, kept: usize) -> f64 {
        let total = *self.mass.last().unwrap_or(&0);
        if total == 0 {
            return 0.0;
        }
        let tail = total - self.mass[kept];
        let (p_total, q_total) = (total as f64, self.mass[kept] as f64);
        // Bins with reference mass: the non-empty kept bins, plus the last kept
        // bin when outliers were folded into it.
        let end = self.nonempty.partition_point(|&b| b < kept);
        let last = kept - 1;
        let extra = (tail > 0 && self.counts[last] == 0).then_some(last);
        let mut kl = 0.0;
        for &b in self.nonempty[..end].iter().chain(extra.iter()) {
            let p = self.counts[b] as f64 + if b == last { tail as f64 } else { 0.0 };
            if self.counts[b] == 0 {
                return f64::INFINITY;
            }
            let level = (QUANT_LEVELS * (b + 1) - 1) / kept;
            let (lo, hi) = (level * kept / QUANT_LEVELS, (level + 1) * kept / QUANT_LEVELS);
            let q = (self.mass[hi] - self.mass[lo]) as f64 / (self.occupied[hi] - self.occupied[lo]) as f64;
            let (pn, qn) = (p / p_total, q / q_total);
            kl += pn * (pn / qn).ln();
        }
        kl
    }
}

/// Calibrates scales over a stream of same-shaped samples.
///
/// Max: `amax / 127`. Percentile: nearest-rank `p`-th percentile of `|x|`
/// over 127. Entropy: KL-optimal clip threshold over 127. A slice whose
/// statistic is zero gets scale 1.0.
pub fn calibrate(stream: &[DenseMatrix], method: CalibMethod, granularity: Granularity) -> Result<ScaleSet> {
    let first = stream.first().ok_or(Error::EmptyStream)?;
    let (rows, cols) = (first.rows(), first.cols());
    if let Some(m) = stream.iter().find(|m| (m.rows(), m.cols()) != (rows, cols)) {
        return Err(Error::ShapeMismatch { op: "calibrate", left: (rows, cols), right: (m.rows(), m.cols()) });
    }
    if let CalibMethod::Percentile(p) = method {
        check_percentile(p)?;
    }
    let slices = granularity.slices(rows);
    let rows_per_slice = rows / slices;
    // Absolute values of one slice across the whole stream.
    let gather = |s: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(stream.len() * rows_per_slice * cols);
        for m in stream {
            for r in s * rows_per_slice..(s + 1) * rows_per_slice {
                v.extend(m.row_f64(r).into_iter().map(f64::abs));
            }
        }
        v
    };
    let stats = par::map_range(slices, |s| {
        let mut v = gather(s);
        match method {
            CalibMethod::Max => v.iter().copied().fold(0.0, f64::max),
            CalibMethod::Percentile(p) => {
                if v.is_empty() {
                    return 0.0;
                }
                v.sort_by(f64::total_cmp);
                let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
                v[rank.min(v.len()) - 1]
            }
            CalibMethod::Entropy => {
                let amax = v.iter().copied().fold(0.0, f64::max);
                if amax == 0.0 {
                    return 0.0;
                }
                let mut hist = Histogram::new(amax, HISTOGRAM_BINS);
                hist.extend(v);
                hist.entropy_threshold()
            }
        }
    });
    let scales = stats.into_iter().map(|t| if t > 0.0 { t / 127.0 } else { 1.0 }).collect();
    ScaleSet::new(granularity, scales)
}

/// `q = clamp(round_ties_even(x / scale), -128, 127)`.
pub fn quantize(x: &DenseMatrix, s: &ScaleSet) -> Result<DenseMatrix> {
    s.check_rows(x.rows())?;
    let mut q = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let scale = s.for_row(r);
        q.extend(x.row_f64(r).into_iter().map(|v| quantize_value(v, scale)));
    }
    DenseMatrix::from_i8(x.rows(), x.cols(), q)
}

pub fn quantize_value(x: f64, scale: f64) -> i8 {
    (x / scale).round_ties_even().clamp(-128.0, 127.0) as i8
}

/// `q * scale`, row-major.
pub fn dequantize(q: &DenseMatrix, s: &ScaleSet) -> Result<Vec<f64>> {
    if q.dtype() != DType::Int8 {
        return Err(Error::DTypeMismatch { expected: DType::Int8, found: q.dtype() });
    }
    s.check_rows(q.rows())?;
    let mut out = Vec::with_capacity(q.len());
    for r in 0..q.rows() {
        let scale = s.for_row(r);
        out.extend(q.row_f64(r).into_iter().map(|v| v * scale));
    }
    Ok(out)
}

/// INT8 sparse GEMM with INT32 accumulation, rescaled to real values:
/// `out[i][j] = acc[i][j] * sa(i) * sb`. `sa` may be per tensor or per row of
/// `a`; `sb` must be per tensor. The result is stored as FP32.
pub fn quantized_sparse_gemm(
    a: &SparseNM,
    b: &DenseMatrix,
    sa: &ScaleSet,
    sb: &ScaleSet,
    plan: &SpmmPlan,
) -> Result<DenseMatrix> {
    sa.check_rows(a.rows())?;
    if sb.granularity() != Granularity::PerTensor {
        return Err(Error::GranularityMismatch("activation scales must be per tensor".into()));
    }
    let acc = spmm(a, b, NumericFormat::INT8, plan)?;
    let sb = sb.scales()[0];
    let mut out = Vec::with_capacity(acc.len());
    for r in 0..acc.rows() {
        let scale = sa.for_row(r) * sb;
        out.extend(acc.row_f64(r).into_iter().map(|v| v * scale));
    }
    DenseMatrix::from_f64_rounded(acc.rows(), acc.cols(), DType::Fp32, &out)
}
