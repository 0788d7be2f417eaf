//! Compressed N:M storage: kept values plus packed positional metadata.
//!
//! A matrix conforming to an N:M pattern has at most `n` nonzeros in every
//! aligned group of `m` consecutive row elements. Compression stores exactly
//! `n` values per group (zero-padded when the group has fewer nonzeros) and,
//! for each stored value, its index inside the group in `ceil(log2 m)` bits.
//!
//! Metadata layout: fields are packed little-endian within bytes (the first
//! kept index of a row occupies the lowest bits of the row's first byte), in
//! the same order as the values. Each row starts on a byte boundary.
//!
//! Padding rule: a group with fewer than `n` nonzeros keeps all nonzeros,
//! then any `-0.0` entries, then the smallest unused indices. Stored indices
//! are always strictly increasing.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Buffer, DType, DenseMatrix, Element, NMPattern};

/// Direction along which a mask or matrix is constrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Groups of `m` consecutive elements within each row.
    Rows,
    /// Groups of `m` consecutive elements within each column.
    Cols,
}

/// Boolean keep-mask. A valid N:M mask has exactly `n` kept positions in every group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::LengthMismatch { expected: rows * cols, found: bits.len() });
        }
        Ok(Mask { rows, cols, bits })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, bits: vec![true; rows * cols] }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, keep: bool) {
        self.bits[row * self.cols + col] = keep;
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn transpose(&self) -> Mask {
        let mut bits = Vec::with_capacity(self.bits.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                bits.push(self.get(r, c));
            }
        }
        Mask { rows: self.cols, cols: self.rows, bits }
    }

    /// Checks that every aligned group along `axis` keeps exactly `n` positions.
    pub fn check(&self, pattern: NMPattern, axis: Axis) -> Result<()> {
        let m = match axis {
            Axis::Rows => {
                pattern.check_divides(self.cols)?;
                self.clone()
            }
            Axis::Cols => {
                pattern.check_divides(self.rows)?;
                self.transpose()
            }
        };
        let gm = pattern.m();
        for r in 0..m.rows {
            for g in 0..m.cols / gm {
                let kept = (0..gm).filter(|&i| m.get(r, g * gm + i)).count();
                if kept != pattern.n() {
                    return Err(Error::NonConforming { row: r, group: g, nonzeros: kept, allowed: pattern.n() });
                }
            }
        }
        Ok(())
    }

    pub fn is_valid(&self, pattern: NMPattern, axis: Axis) -> bool {
        self.check(pattern, axis).is_ok()
    }
}

/// Compressed N:M matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseNM {
    rows: usize,
    cols: usize,
    pattern: NMPattern,
    dtype: DType,
    values: Buffer,
    meta: Vec<u8>,
}

/// Metadata bytes per row for a `cols`-wide matrix.
pub fn meta_row_bytes(cols: usize, pattern: NMPattern) -> usize {
    let fields = cols / pattern.m() * pattern.n();
    (fields * pattern.index_bits() as usize).div_ceil(8)
}

#[inline]
fn read_field(row: &[u8], field: usize, bits: u32) -> usize {
    let off = field * bits as usize;
    let (byte, shift) = (off / 8, off % 8);
    let mut v = (row[byte] as u16) >> shift;
    if shift + bits as usize > 8 {
        v |= (row[byte + 1] as u16) << (8 - shift);
    }
    (v & ((1u16 << bits) - 1)) as usize
}

#[inline]
fn write_field(row: &mut [u8], field: usize, bits: u32, value: usize) {
    let off = field * bits as usize;
    let (byte, shift) = (off / 8, off % 8);
    let v = (value as u16) << shift;
    row[byte] |= v as u8;
    if shift + bits as usize > 8 {
        row[byte + 1] |= (v >> 8) as u8;
    }
}

impl SparseNM {
    /// Assembles a compressed matrix from raw parts, validating every invariant:
    /// lengths, representability, strictly increasing in-range indices and
    /// zeroed row padding.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        pattern: NMPattern,
        dtype: DType,
        values: Buffer,
        meta: Vec<u8>,
    ) -> Result<Self> {
        pattern.check_divides(cols)?;
        let kept = cols / pattern.m() * pattern.n();
        // Reuse the dense constructor for length, kind and representability checks.
        let values = DenseMatrix::new(rows, kept, dtype, values)?.into_data();
        let row_bytes = meta_row_bytes(cols, pattern);
        if meta.len() != rows * row_bytes {
            return Err(Error::LengthMismatch { expected: rows * row_bytes, found: meta.len() });
        }
        let s = SparseNM { rows, cols, pattern, dtype, values, meta };
        s.validate_meta()?;
        Ok(s)
    }

    fn validate_meta(&self) -> Result<()> {
        let (n, m) = (self.pattern.n(), self.pattern.m());
        let bits = self.pattern.index_bits();
        let used_bits = self.kept_per_row() * bits as usize;
        for r in 0..self.rows {
            let row = self.meta_row(r);
            for g in 0..self.groups_per_row() {
                let mut prev: Option<usize> = None;
                for s in 0..n {
                    let idx = read_field(row, g * n + s, bits);
                    if idx >= m {
                        return Err(Error::MalformedMetadata { row: r, group: g, reason: "index out of range" });
                    }
                    if prev.is_some_and(|p| idx <= p) {
                        return Err(Error::MalformedMetadata { row: r, group: g, reason: "indices not strictly increasing" });
                    }
                    prev = Some(idx);
                }
            }
            if used_bits % 8 != 0 && row[row.len() - 1] >> (used_bits % 8) != 0 {
                return Err(Error::MalformedMetadata {
                    row: r,
                    group: self.groups_per_row().saturating_sub(1),
                    reason: "nonzero padding bits",
                });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Column count of the uncompressed matrix.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pattern(&self) -> NMPattern {
        self.pattern
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn values(&self) -> &Buffer {
        &self.values
    }

    pub fn meta(&self) -> &[u8] {
        &self.meta
    }

    pub fn groups_per_row(&self) -> usize {
        self.cols / self.pattern.m()
    }

    pub fn kept_per_row(&self) -> usize {
        self.groups_per_row() * self.pattern.n()
    }

    pub fn meta_row_bytes(&self) -> usize {
        meta_row_bytes(self.cols, self.pattern)
    }

    pub fn meta_row(&self, row: usize) -> &[u8] {
        let rb = self.meta_row_bytes();
        &self.meta[row * rb..(row + 1) * rb]
    }

    /// Intra-group index of kept slot `slot` (`slot = group * n + s`) in `row`.
    pub fn index(&self, row: usize, slot: usize) -> usize {
        read_field(self.meta_row(row), slot, self.pattern.index_bits())
    }

    /// Metadata of one row as `[[i0, i1], [i0, i1], ...]` groups.
    pub fn row_indices(&self, row: usize) -> Vec<Vec<usize>> {
        let n = self.pattern.n();
        (0..self.groups_per_row())
            .map(|g| (0..n).map(|s| self.index(row, g * n + s)).collect())
            .collect()
    }

    /// Expands a row's metadata into absolute column offsets, one per kept slot.
    pub fn expand_row(&self, row: usize, out: &mut Vec<usize>) {
        out.clear();
        let (n, m) = (self.pattern.n(), self.pattern.m());
        let bits = self.pattern.index_bits();
        let meta = self.meta_row(row);
        for slot in 0..self.kept_per_row() {
            out.push(slot / n * m + read_field(meta, slot, bits));
        }
    }
}

/// First group with more than `n` nonzeros, as `(row, group, nonzeros)`.
pub fn first_violation(a: &DenseMatrix, pattern: NMPattern) -> Result<Option<(usize, usize, usize)>> {
    pattern.check_divides(a.cols())?;
    let m = pattern.m();
    for r in 0..a.rows() {
        for g in 0..a.cols() / m {
            let nz = (0..m).filter(|&i| a.is_nonzero(r, g * m + i)).count();
            if nz > pattern.n() {
                return Ok(Some((r, g, nz)));
            }
        }
    }
    Ok(None)
}

/// True iff every aligned group of `m` row elements has at most `n` nonzeros.
pub fn check_conformance(a: &DenseMatrix, pattern: NMPattern) -> Result<bool> {
    Ok(first_violation(a, pattern)?.is_none())
}

/// Compresses a conforming matrix. Rows are processed independently (in
/// parallel when enabled); the result does not depend on the partition.
pub fn compress(a: &DenseMatrix, pattern: NMPattern) -> Result<SparseNM> {
    pattern.check_divides(a.cols())?;
    let (values, meta) = match a.data() {
        Buffer::F32(v) => {
            let (v, m) = compress_rows(v, a.rows(), a.cols(), pattern)?;
            (Buffer::F32(v), m)
        }
        Buffer::I8(v) => {
            let (v, m) = compress_rows(v, a.rows(), a.cols(), pattern)?;
            (Buffer::I8(v), m)
        }
        Buffer::I32(v) => {
            let (v, m) = compress_rows(v, a.rows(), a.cols(), pattern)?;
            (Buffer::I32(v), m)
        }
    };
    Ok(SparseNM { rows: a.rows(), cols: a.cols(), pattern, dtype: a.dtype(), values, meta })
}

fn compress_rows<T: Element>(
    data: &[T],
    rows: usize,
    cols: usize,
    pattern: NMPattern,
) -> Result<(Vec<T>, Vec<u8>)> {
    let per_row = par::map_range(rows, |r| compress_row(&data[r * cols..(r + 1) * cols], r, pattern));
    let kept = cols / pattern.m() * pattern.n();
    let mut values = Vec::with_capacity(rows * kept);
    let mut meta = Vec::with_capacity(rows * meta_row_bytes(cols, pattern));
    for row in per_row {
        let (v, m) = row?;
        values.extend_from_slice(&v);
        meta.extend_from_slice(&m);
    }
    Ok((values, meta))
}

fn compress_row<T: Element>(row: &[T], r: usize, pattern: NMPattern) -> Result<(Vec<T>, Vec<u8>)> {
    let (n, m) = (pattern.n(), pattern.m());
    let bits = pattern.index_bits();
    let groups = row.len() / m;
    let mut values = Vec::with_capacity(groups * n);
    let mut meta = vec![0u8; meta_row_bytes(row.len(), pattern)];
    let mut keep = [false; NMPattern::MAX_M];
    for (g, group) in row.chunks_exact(m).enumerate() {
        keep[..m].fill(false);
        let mut count = 0;
        for (i, x) in group.iter().enumerate() {
            if x.is_nonzero() {
                keep[i] = true;
                count += 1;
            }
        }
        if count > n {
            return Err(Error::NonConforming { row: r, group: g, nonzeros: count, allowed: n });
        }
        for (i, x) in group.iter().enumerate() {
            if count < n && !keep[i] && x.is_signed_zero() {
                keep[i] = true;
                count += 1;
            }
        }
        for k in keep[..m].iter_mut() {
            if count == n {
                break;
            }
            if !*k {
                *k = true;
                count += 1;
            }
        }
        let mut slot = g * n;
        for (i, x) in group.iter().enumerate() {
            if keep[i] {
                values.push(*x);
                write_field(&mut meta, slot, bits, i);
                slot += 1;
            }
        }
    }
    Ok((values, meta))
}

/// Expands a compressed matrix back to its dense `rows x cols` form. Slots
/// receive their stored value at `group * m + index`; all other positions are zero.
pub fn decompress(s: &SparseNM) -> DenseMatrix {
    let data = match &s.values {
        Buffer::F32(v) => Buffer::F32(scatter(s, v)),
        Buffer::I8(v) => Buffer::I8(scatter(s, v)),
        Buffer::I32(v) => Buffer::I32(scatter(s, v)),
    };
    DenseMatrix::new(s.rows, s.cols, s.dtype, data).expect("values validated at construction")
}

fn scatter<T: Element>(s: &SparseNM, values: &[T]) -> Vec<T> {
    let kept = s.kept_per_row();
    let mut out = vec![T::ZERO; s.rows * s.cols];
    let mut offsets = Vec::with_capacity(kept);
    for r in 0..s.rows {
        s.expand_row(r, &mut offsets);
        let dst = &mut out[r * s.cols..(r + 1) * s.cols];
        for (slot, &c) in offsets.iter().enumerate() {
            dst[c] = values[r * kept + slot];
        }
    }
    out
}

/// Bits needed for values plus metadata, excluding any byte padding:
/// `rows * cols * (n/m) * (width + ceil(log2 m))`.
pub fn storage_bits(s: &SparseNM) -> u64 {
    storage_bits_for(s.rows, s.cols, s.pattern, s.dtype)
}

pub fn storage_bits_for(rows: usize, cols: usize, pattern: NMPattern, dtype: DType) -> u64 {
    let kept = rows as u64 * (cols / pattern.m()) as u64 * pattern.n() as u64;
    kept * (dtype.bits() + pattern.index_bits() as u64)
}

/// Bits of the same matrix stored densely.
pub fn dense_bits(rows: usize, cols: usize, dtype: DType) -> u64 {
    rows as u64 * cols as u64 * dtype.bits()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32m(rows: usize, cols: usize, v: &[f32]) -> DenseMatrix {
        DenseMatrix::from_f32(rows, cols, DType::Fp32, v.to_vec()).unwrap()
    }

    #[test]
    fn conformance_examples() {
        let p = NMPattern::TWO_FOUR;
        let fig = f32m(2, 8, &[1., 0., 0., 2., 0., 3., 4., 0., 0., 5., 0., 6., 7., 0., 0., 0.]);
        assert!(check_conformance(&fig, p).unwrap());
        assert!(check_conformance(&DenseMatrix::zeros(3, 8, DType::Fp16), p).unwrap());
        assert!(!check_conformance(&f32m(1, 4, &[1., 1., 1., 0.]), p).unwrap());
        assert_eq!(first_violation(&f32m(1, 8, &[1., 0., 0., 0., 1., 1., 1., 0.]), p).unwrap(), Some((0, 1, 3)));
        assert!(check_conformance(&f32m(1, 6, &[0.; 6]), p).is_err());
    }

    #[test]
    fn metadata_of_first_row() {
        let a = f32m(1, 8, &[1., 0., 0., 2., 0., 3., 4., 0.]);
        let s = compress(&a, NMPattern::TWO_FOUR).unwrap();
        assert_eq!(s.row_indices(0), vec![vec![0, 3], vec![1, 2]]);
        assert_eq!(s.values(), &Buffer::F32(vec![1., 2., 3., 4.]));
        // fields 0,3,1,2 at 2 bits each, low field first: 0b10_01_11_00
        assert_eq!(s.meta(), &[0b1001_1100]);
    }

    #[test]
    fn padding_rule() {
        let p = NMPattern::TWO_FOUR;
        let s = compress(&f32m(1, 4, &[0.; 4]), p).unwrap();
        assert_eq!(s.values(), &Buffer::F32(vec![0., 0.]));
        assert_eq!(s.row_indices(0), vec![vec![0, 1]]);
        let s = compress(&f32m(1, 4, &[0., 0., 0., 5.]), p).unwrap();
        assert_eq!(s.row_indices(0), vec![vec![0, 3]]);
        let s = compress(&f32m(1, 4, &[0., 0., -0.0, 5.]), p).unwrap();
        assert_eq!(s.row_indices(0), vec![vec![2, 3]]);
        assert!(decompress(&s).bit_eq(&f32m(1, 4, &[0., 0., -0.0, 5.])));
    }

    #[test]
    fn decompress_places_values() {
        let s = SparseNM::from_parts(
            1,
            4,
            NMPattern::TWO_FOUR,
            DType::Fp32,
            Buffer::F32(vec![7., 9.]),
            vec![0b1100],
        )
        .unwrap();
        assert_eq!(decompress(&s).to_f64_vec(), vec![7., 0., 0., 9.]);
        let empty = compress(&DenseMatrix::zeros(0, 8, DType::Int8), NMPattern::TWO_FOUR).unwrap();
        assert_eq!(decompress(&empty).rows(), 0);
    }

    #[test]
    fn malformed_metadata_rejected() {
        let mk = |meta: u8| {
            SparseNM::from_parts(1, 4, NMPattern::TWO_FOUR, DType::Int8, Buffer::I8(vec![1, 2]), vec![meta])
        };
        // indices [3, 0]: not increasing
        assert!(matches!(mk(0b00_11), Err(Error::MalformedMetadata { .. })));
        // indices [1, 1]
        assert!(matches!(mk(0b01_01), Err(Error::MalformedMetadata { .. })));
        // valid [0, 3] but garbage in padding bits
        assert!(matches!(mk(0b1000_1100), Err(Error::MalformedMetadata { .. })));
        assert!(mk(0b1100).is_ok());
    }

    #[test]
    fn three_bit_fields_straddle_bytes() {
        let p = NMPattern::new(3, 8).unwrap();
        let row: Vec<i8> = vec![0, 4, 0, 0, 0, 5, 0, 6, 1, 0, 0, 0, 0, 0, 2, 3];
        let a = DenseMatrix::from_i8(1, 16, row).unwrap();
        let s = compress(&a, p).unwrap();
        assert_eq!(s.row_indices(0), vec![vec![1, 5, 7], vec![0, 6, 7]]);
        assert_eq!(s.meta().len(), 3);
        assert!(decompress(&s).bit_eq(&a));
    }

    #[test]
    fn storage_arithmetic() {
        let p = NMPattern::TWO_FOUR;
        assert_eq!(storage_bits_for(1, 4, p, DType::Fp16), 36);
        assert_eq!(dense_bits(1, 4, DType::Fp16), 64);
        assert_eq!(storage_bits_for(1, 4, p, DType::Int8), 20);
        assert_eq!(storage_bits_for(1, 2, NMPattern::ONE_TWO, DType::Fp16), 17);
    }

    #[test]
    fn mask_checks() {
        let p = NMPattern::TWO_FOUR;
        let m = Mask::new(1, 4, vec![true, false, false, true]).unwrap();
        assert!(m.is_valid(p, Axis::Rows));
        assert!(!Mask::new(1, 4, vec![true, false, false, false]).unwrap().is_valid(p, Axis::Rows));
        assert!(m.transpose().is_valid(p, Axis::Cols));
        assert!(!m.is_valid(p, Axis::Cols));
    }
}
