//! `S24T` tensor archive: a flat, little-endian container of named tensors.
//!
//! ```text
//! magic    4  "S24T"
//! version  u16  (1)
//! count    u32
//! entries:
//!   name_len u16, name (UTF-8)
//!   kind     u8   0 dense, 1 sparse N:M, 2 scale set, 3 mask
//!   dtype    u8   0 fp32, 1 tf32, 2 fp16, 3 bf16, 4 int8, 5 int32, 6 bit, 7 f64
//!   ndims    u8, then ndims x u64 dims
//!   sparse:  n u16, m u16
//!   scales:  granularity u8 (0 per-tensor, 1 per-channel, 2 per-row)
//!   payload
//! ```
//!
//! Payloads: dense and sparse values are packed at the element width of
//! their dtype (fp32/tf32 as f32 bits, fp16/bf16 as 16-bit patterns, int8,
//! int32). A sparse entry stores `rows x cols*n/m` values, then its metadata
//! with each row padded to a byte. Scale sets are f64. Masks are bits,
//! LSB first, each row padded to a byte with zero bits.
//!
//! Reading validates every invariant, so `to_bytes(from_bytes(b)) == b`
//! whenever `from_bytes` succeeds.

use std::path::Path;

use half::{bf16, f16};
use thiserror::Error;

use crate::codec::{meta_row_bytes, Mask, SparseNM};
use crate::quant::{Granularity, ScaleSet};
use crate::tensor::{Buffer, DType, DenseMatrix, NMPattern};

pub const MAGIC: [u8; 4] = *b"S24T";
pub const VERSION: u16 = 1;

const KIND_DENSE: u8 = 0;
const KIND_SPARSE: u8 = 1;
const KIND_SCALES: u8 = 2;
const KIND_MASK: u8 = 3;
const DTYPE_BIT: u8 = 6;
const DTYPE_F64: u8 = 7;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("bad magic: not an S24T archive")]
    BadMagic,

    #[error("unsupported archive version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u16),

    #[error("truncated archive: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("invalid entry '{entry}': {reason}")]
    Invalid { entry: String, reason: String },

    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ArchiveError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Dense(DenseMatrix),
    Sparse(SparseNM),
    Scales(ScaleSet),
    Mask(Mask),
}

impl Tensor {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Tensor::Dense(_) => "dense",
            Tensor::Sparse(_) => "sparse",
            Tensor::Scales(_) => "scales",
            Tensor::Mask(_) => "mask",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub entries: Vec<Entry>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push(Entry { name: name.into(), tensor });
    }

    /// First entry called `name`.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| invalid("", "too many entries"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            write_entry(&mut out, e)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| ArchiveError::BadMagic)? != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(ArchiveError::UnsupportedVersion(version));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            entries.push(read_entry(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err(ArchiveError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(TensorArchive { entries })
    }
}

fn invalid(entry: &str, reason: impl ToString) -> ArchiveError {
    ArchiveError::Invalid { entry: entry.to_string(), reason: reason.to_string() }
}

fn write_entry(out: &mut Vec<u8>, e: &Entry) -> Result<()> {
    let name = e.name.as_bytes();
    let len = u16::try_from(name.len()).map_err(|_| invalid(&e.name, "name longer than 65535 bytes"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name);
    let dims = |out: &mut Vec<u8>, d: &[usize]| {
        out.push(d.len() as u8);
        for &x in d {
            out.extend_from_slice(&(x as u64).to_le_bytes());
        }
    };
    match &e.tensor {
        Tensor::Dense(m) => {
            out.extend_from_slice(&[KIND_DENSE, m.dtype().tag()]);
            dims(out, &[m.rows(), m.cols()]);
            write_values(out, m.data(), m.dtype());
        }
        Tensor::Sparse(s) => {
            out.extend_from_slice(&[KIND_SPARSE, s.dtype().tag()]);
            dims(out, &[s.rows(), s.cols()]);
            out.extend_from_slice(&(s.pattern().n() as u16).to_le_bytes());
            out.extend_from_slice(&(s.pattern().m() as u16).to_le_bytes());
            write_values(out, s.values(), s.dtype());
            out.extend_from_slice(s.meta());
        }
        Tensor::Scales(s) => {
            out.extend_from_slice(&[KIND_SCALES, DTYPE_F64]);
            dims(out, &[s.scales().len()]);
            out.push(s.granularity().tag());
            for v in s.scales() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Tensor::Mask(m) => {
            out.extend_from_slice(&[KIND_MASK, DTYPE_BIT]);
            dims(out, &[m.rows(), m.cols()]);
            for row in m.bits().chunks(m.cols().max(1)).take(m.rows()) {
                let mut packed = vec![0u8; row.len().div_ceil(8)];
                for (i, &b) in row.iter().enumerate() {
                    packed[i / 8] |= (b as u8) << (i % 8);
                }
                out.extend_from_slice(&packed);
            }
        }
    }
    Ok(())
}

fn write_values(out: &mut Vec<u8>, data: &Buffer, dtype: DType) {
    match data {
        Buffer::F32(v) => {
            for &x in v {
                match dtype {
                    DType::Fp16 => out.extend_from_slice(&f16::from_f32(x).to_bits().to_le_bytes()),
                    DType::Bf16 => out.extend_from_slice(&bf16::from_f32(x).to_bits().to_le_bytes()),
                    _ => out.extend_from_slice(&x.to_bits().to_le_bytes()),
                }
            }
        }
        Buffer::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
        Buffer::I32(v) => {
            for &x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(ArchiveError::Truncated { offset: self.pos, needed: n });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// `count * width` bytes, checked before anything is allocated.
    fn block(&mut self, count: usize, width: usize) -> Result<&'a [u8]> {
        let n = count.checked_mul(width).ok_or(ArchiveError::Truncated { offset: self.pos, needed: usize::MAX })?;
        self.take(n)
    }
}

fn read_entry(r: &mut Reader<'_>) -> Result<Entry> {
    let len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(len)?).map_err(|_| invalid("?", "name is not UTF-8"))?.to_string();
    let kind = r.u8()?;
    let dtype_tag = r.u8()?;
    let ndims = r.u8()? as usize;
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        let d = r.u64()?;
        dims.push(usize::try_from(d).map_err(|_| invalid(&name, "dimension too large"))?);
    }
    let bad = |reason: &str| invalid(&name, reason);
    let matrix_dims = |dims: &[usize]| -> Result<(usize, usize)> {
        match *dims {
            [rows, cols] => Ok((rows, cols)),
            _ => Err(bad("expected 2 dimensions")),
        }
    };
    let tensor = match kind {
        KIND_DENSE | KIND_SPARSE => {
            let dtype = DType::from_tag(dtype_tag).ok_or_else(|| bad("unknown dtype"))?;
            let (rows, cols) = matrix_dims(&dims)?;
            if kind == KIND_DENSE {
                let len = rows.checked_mul(cols).ok_or_else(|| bad("dimension overflow"))?;
                let data = read_values(r, len, dtype, &name)?;
                Tensor::Dense(DenseMatrix::new(rows, cols, dtype, data).map_err(|e| invalid(&name, e))?)
            } else {
                let (n, m) = (r.u16()? as usize, r.u16()? as usize);
                let pattern = NMPattern::new(n, m).map_err(|e| invalid(&name, e))?;
                pattern.check_divides(cols).map_err(|e| invalid(&name, e))?;
                let kept = rows.checked_mul(cols / m * n).ok_or_else(|| bad("dimension overflow"))?;
                let values = read_values(r, kept, dtype, &name)?;
                let meta = r.block(rows, meta_row_bytes(cols, pattern))?.to_vec();
                let s = SparseNM::from_parts(rows, cols, pattern, dtype, values, meta).map_err(|e| invalid(&name, e))?;
                Tensor::Sparse(s)
            }
        }
        KIND_SCALES => {
            if dtype_tag != DTYPE_F64 {
                return Err(bad("scale sets are stored as f64"));
            }
            let [len] = dims[..] else {
                return Err(bad("expected 1 dimension"));
            };
            let granularity = Granularity::from_tag(r.u8()?).ok_or_else(|| bad("unknown granularity"))?;
            let raw = r.block(len, 8)?;
            let scales = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::Scales(ScaleSet::new(granularity, scales).map_err(|e| invalid(&name, e))?)
        }
        KIND_MASK => {
            if dtype_tag != DTYPE_BIT {
                return Err(bad("masks are stored as bits"));
            }
            let (rows, cols) = matrix_dims(&dims)?;
            let row_bytes = cols.div_ceil(8);
            let raw = r.block(rows, row_bytes)?;
            let mut bits = Vec::with_capacity(rows * cols);
            for row in raw.chunks(row_bytes.max(1)).take(rows) {
                for c in 0..cols {
                    bits.push(row[c / 8] >> (c % 8) & 1 == 1);
                }
                if cols % 8 != 0 && row[row_bytes - 1] >> (cols % 8) != 0 {
                    return Err(bad("nonzero mask padding bits"));
                }
            }
            Tensor::Mask(Mask::new(rows, cols, bits).map_err(|e| invalid(&name, e))?)
        }
        _ => return Err(bad("unknown entry kind")),
    };
    Ok(Entry { name, tensor })
}

fn read_values(r: &mut Reader<'_>, len: usize, dtype: DType, name: &str) -> Result<Buffer> {
    let width = (dtype.bits() / 8) as usize;
    let width = if matches!(dtype, DType::Fp16 | DType::Bf16) { 2 } else { width };
    let raw = r.block(len, width)?;
    Ok(match dtype {
        DType::Int8 => Buffer::I8(raw.iter().map(|&b| b as i8).collect()),
        DType::Int32 => Buffer::I32(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4"))).collect()),
        DType::Fp32 | DType::Tf32 => {
            Buffer::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
        }
        DType::Fp16 | DType::Bf16 => {
            let mut v = Vec::with_capacity(len);
            for c in raw.chunks_exact(2) {
                let bits = u16::from_le_bytes([c[0], c[1]]);
                let (x, back) = if dtype == DType::Fp16 {
                    let x = f16::from_bits(bits).to_f32();
                    (x, f16::from_f32(x).to_bits())
                } else {
                    let x = bf16::from_bits(bits).to_f32();
                    (x, bf16::from_f32(x).to_bits())
                };
                if back != bits {
                    return Err(invalid(name, format!("non-canonical {dtype} bit pattern {bits:#06x}")));
                }
                v.push(x);
            }
            Buffer::F32(v)
        }
    })
}
