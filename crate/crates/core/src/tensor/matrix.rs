//! Row-major dense matrix container.

use crate::error::{Error, Result};
use crate::tensor::format::{round_to_format, DType};

/// Scalar element held by a [`Buffer`].
pub trait Element: Copy + Send + Sync + PartialEq + std::fmt::Debug + 'static {
    const ZERO: Self;

    /// True for any value that must occupy a kept slot. Negative zero is not
    /// nonzero, see [`Element::is_signed_zero`].
    fn is_nonzero(self) -> bool;

    /// True when the value compares equal to zero but is not the all-zero bit
    /// pattern (only `-0.0` for floats).
    fn is_signed_zero(self) -> bool;

    fn to_f64(self) -> f64;

    fn bit_eq(self, other: Self) -> bool;
}

impl Element for f32 {
    const ZERO: Self = 0.0;

    #[inline]
    fn is_nonzero(self) -> bool {
        self != 0.0
    }

    #[inline]
    fn is_signed_zero(self) -> bool {
        self == 0.0 && self.is_sign_negative()
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn bit_eq(self, other: Self) -> bool {
        self.to_bits() == other.to_bits()
    }
}

macro_rules! int_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0;

            #[inline]
            fn is_nonzero(self) -> bool {
                self != 0
            }

            #[inline]
            fn is_signed_zero(self) -> bool {
                false
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn bit_eq(self, other: Self) -> bool {
                self == other
            }
        }
    };
}

int_element!(i8);
int_element!(i32);

/// Typed element storage.
#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl Buffer {
    pub fn zeros(dtype: DType, len: usize) -> Buffer {
        match dtype {
            DType::Int8 => Buffer::I8(vec![0; len]),
            DType::Int32 => Buffer::I32(vec![0; len]),
            _ => Buffer::F32(vec![0.0; len]),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::I8(v) => v.len(),
            Buffer::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            Buffer::F32(v) => v[i] as f64,
            Buffer::I8(v) => v[i] as f64,
            Buffer::I32(v) => v[i] as f64,
        }
    }

    pub fn is_nonzero(&self, i: usize) -> bool {
        match self {
            Buffer::F32(v) => v[i].is_nonzero(),
            Buffer::I8(v) => v[i].is_nonzero(),
            Buffer::I32(v) => v[i].is_nonzero(),
        }
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0`, NaN payloads compare by bits).
    pub fn bit_eq(&self, other: &Buffer) -> bool {
        fn eq<T: Element>(a: &[T], b: &[T]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(*y))
        }
        match (self, other) {
            (Buffer::F32(a), Buffer::F32(b)) => eq(a, b),
            (Buffer::I8(a), Buffer::I8(b)) => eq(a, b),
            (Buffer::I32(a), Buffer::I32(b)) => eq(a, b),
            _ => false,
        }
    }

    fn matches(&self, dtype: DType) -> bool {
        matches!(
            (self, dtype),
            (Buffer::I8(_), DType::Int8)
                | (Buffer::I32(_), DType::Int32)
                | (Buffer::F32(_), DType::Fp32 | DType::Tf32 | DType::Fp16 | DType::Bf16)
        )
    }
}

/// A row-major `rows x cols` matrix whose elements are representable in `dtype`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    dtype: DType,
    data: Buffer,
}

impl DenseMatrix {
    /// Builds a matrix, validating length, buffer kind and representability.
    pub fn new(rows: usize, cols: usize, dtype: DType, data: Buffer) -> Result<Self> {
        if !data.matches(dtype) {
            return Err(Error::DTypeMismatch { expected: dtype, found: buffer_dtype(&data) });
        }
        let len = rows.checked_mul(cols).ok_or(Error::Overflow)?;
        if data.len() != len {
            return Err(Error::LengthMismatch { expected: len, found: data.len() });
        }
        if let Buffer::F32(v) = &data {
            if dtype != DType::Fp32 {
                if let Some(i) = v.iter().position(|&x| !representable(x, dtype)) {
                    return Err(Error::Unrepresentable { value: v[i] as f64, dtype });
                }
            }
        }
        Ok(DenseMatrix { rows, cols, dtype, data })
    }

    pub fn from_f32(rows: usize, cols: usize, dtype: DType, data: Vec<f32>) -> Result<Self> {
        Self::new(rows, cols, dtype, Buffer::F32(data))
    }

    pub fn from_i8(rows: usize, cols: usize, data: Vec<i8>) -> Result<Self> {
        Self::new(rows, cols, DType::Int8, Buffer::I8(data))
    }

    pub fn from_i32(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self> {
        Self::new(rows, cols, DType::Int32, Buffer::I32(data))
    }

    /// Rounds every value into `dtype` (round-to-nearest-even, integers saturate).
    pub fn from_f64_rounded(rows: usize, cols: usize, dtype: DType, values: &[f64]) -> Result<Self> {
        let data = match dtype {
            DType::Int8 => Buffer::I8(values.iter().map(|&x| round_to_format(x, dtype) as i8).collect()),
            DType::Int32 => Buffer::I32(values.iter().map(|&x| round_to_format(x, dtype) as i32).collect()),
            _ => Buffer::F32(values.iter().map(|&x| round_to_format(x, dtype) as f32).collect()),
        };
        Self::new(rows, cols, dtype, data)
    }

    pub fn zeros(rows: usize, cols: usize, dtype: DType) -> Self {
        DenseMatrix { rows, cols, dtype, data: Buffer::zeros(dtype, rows * cols) }
    }

    pub fn identity(n: usize, dtype: DType) -> Self {
        let values: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
        Self::from_f64_rounded(n, n, dtype, &values).expect("identity is representable")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &Buffer {
        &self.data
    }

    pub fn into_data(self) -> Buffer {
        self.data
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_f64(&self, row: usize, col: usize) -> f64 {
        self.data.get_f64(row * self.cols + col)
    }

    pub fn is_nonzero(&self, row: usize, col: usize) -> bool {
        self.data.is_nonzero(row * self.cols + col)
    }

    /// All elements widened to f64, row-major.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.data.get_f64(i)).collect()
    }

    pub fn row_f64(&self, row: usize) -> Vec<f64> {
        (0..self.cols).map(|c| self.get_f64(row, c)).collect()
    }

    pub fn bit_eq(&self, other: &DenseMatrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.dtype == other.dtype
            && self.data.bit_eq(&other.data)
    }

    pub fn transpose(&self) -> DenseMatrix {
        fn tr<T: Element>(v: &[T], rows: usize, cols: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(v.len());
            for c in 0..cols {
                for r in 0..rows {
                    out.push(v[r * cols + c]);
                }
            }
            out
        }
        let data = match &self.data {
            Buffer::F32(v) => Buffer::F32(tr(v, self.rows, self.cols)),
            Buffer::I8(v) => Buffer::I8(tr(v, self.rows, self.cols)),
            Buffer::I32(v) => Buffer::I32(tr(v, self.rows, self.cols)),
        };
        DenseMatrix { rows: self.cols, cols: self.rows, dtype: self.dtype, data }
    }

    /// Builds a new matrix of the same dtype by picking source elements:
    /// output position `(r, c)` receives `self[src(r, c)]`, or zero when `src` is `None`.
    pub(crate) fn remap(
        &self,
        rows: usize,
        cols: usize,
        src: impl Fn(usize, usize) -> Option<(usize, usize)>,
    ) -> DenseMatrix {
        fn pick<T: Element>(
            v: &[T],
            stride: usize,
            rows: usize,
            cols: usize,
            src: &dyn Fn(usize, usize) -> Option<(usize, usize)>,
        ) -> Vec<T> {
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    out.push(match src(r, c) {
                        Some((sr, sc)) => v[sr * stride + sc],
                        None => T::ZERO,
                    });
                }
            }
            out
        }
        let data = match &self.data {
            Buffer::F32(v) => Buffer::F32(pick(v, self.cols, rows, cols, &src)),
            Buffer::I8(v) => Buffer::I8(pick(v, self.cols, rows, cols, &src)),
            Buffer::I32(v) => Buffer::I32(pick(v, self.cols, rows, cols, &src)),
        };
        DenseMatrix { rows, cols, dtype: self.dtype, data }
    }
}

fn representable(x: f32, dtype: DType) -> bool {
    x.is_nan() || (round_to_format(x as f64, dtype) as f32).to_bits() == x.to_bits()
}

fn buffer_dtype(b: &Buffer) -> DType {
    match b {
        Buffer::F32(_) => DType::Fp32,
        Buffer::I8(_) => DType::Int8,
        Buffer::I32(_) => DType::Int32,
    }
}
