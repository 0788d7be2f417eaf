//! GEMM shapes, multiply-accumulate semantics per format, and the reference dense GEMM.
//!
//! Accumulation semantics:
//! - FP32-accumulate pairs: the product of two inputs is formed in f32 (exact
//!   for TF32/FP16/BF16 inputs) and added to an f32 accumulator.
//! - FP16/FP16: each product and each partial sum is rounded to fp16.
//! - INT8/INT32: exact integer products, wrapping 32-bit sums.
//!
//! Every kernel in the crate reduces over `k` in ascending order, so results
//! are bit-stable across runs and tilings.

use crate::error::{Error, Result};
use crate::tensor::format::{to_fp16, NumericFormat};
use crate::tensor::matrix::{Buffer, DenseMatrix, Element};
use crate::tensor::pattern::NMPattern;

/// Dimensions of `C[M x N] = A[M x K] * B[K x N]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GemmShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl GemmShape {
    pub fn new(m: usize, n: usize, k: usize) -> Self {
        GemmShape { m, n, k }
    }

    pub fn dense_macs(self) -> u64 {
        self.m as u64 * self.n as u64 * self.k as u64
    }

    /// Checks the shape against the sparse-GEMM dimension rules of `format`.
    pub fn validate_sparse(self, format: NumericFormat, pattern: NMPattern) -> Result<()> {
        let multiple = format.sparse_k_multiple().ok_or(Error::NoSparseMode(format))?;
        if self.k % multiple != 0 {
            return Err(Error::NotMultiple { what: "GEMM K", value: self.k, multiple });
        }
        pattern.check_divides(self.k)
    }
}

impl std::fmt::Display for GemmShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.m, self.n, self.k)
    }
}

impl std::str::FromStr for GemmShape {
    type Err = Error;

    /// Parses `MxNxK`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split(['x', 'X']).map(|p| p.trim().parse::<usize>()).collect();
        match parts.as_slice() {
            [Ok(m), Ok(n), Ok(k)] => Ok(GemmShape::new(*m, *n, *k)),
            _ => Err(Error::Parse(format!("shape '{s}' is not of the form MxNxK"))),
        }
    }
}

/// One multiply-accumulate step for a given format pair.
pub(crate) trait Mac: Copy + Send + Sync + 'static {
    type In: Element;
    type Acc: Element;

    fn mac(acc: Self::Acc, a: Self::In, b: Self::In) -> Self::Acc;
}

#[derive(Clone, Copy)]
pub(crate) struct MacF32;

#[derive(Clone, Copy)]
pub(crate) struct MacF16;

#[derive(Clone, Copy)]
pub(crate) struct MacI32;

impl Mac for MacF32 {
    type In = f32;
    type Acc = f32;

    #[inline(always)]
    fn mac(acc: f32, a: f32, b: f32) -> f32 {
        acc + a * b
    }
}

impl Mac for MacF16 {
    type In = f32;
    type Acc = f32;

    #[inline(always)]
    fn mac(acc: f32, a: f32, b: f32) -> f32 {
        let p = to_fp16((a * b) as f64);
        to_fp16(acc as f64 + p as f64)
    }
}

impl Mac for MacI32 {
    type In = i8;
    type Acc = i32;

    #[inline(always)]
    fn mac(acc: i32, a: i8, b: i8) -> i32 {
        acc.wrapping_add(a as i32 * b as i32)
    }
}

/// Accumulator buffers produced by the kernels.
pub(crate) trait AccBuffer: Element {
    fn wrap(v: Vec<Self>) -> Buffer;
}

impl AccBuffer for f32 {
    fn wrap(v: Vec<f32>) -> Buffer {
        Buffer::F32(v)
    }
}

impl AccBuffer for i32 {
    fn wrap(v: Vec<i32>) -> Buffer {
        Buffer::I32(v)
    }
}

/// Borrow the typed slice a kernel expects from a buffer.
pub(crate) trait InSlice: Element {
    fn slice(b: &Buffer) -> &[Self];
}

impl InSlice for f32 {
    fn slice(b: &Buffer) -> &[f32] {
        match b {
            Buffer::F32(v) => v,
            _ => unreachable!("dtype checked before dispatch"),
        }
    }
}

impl InSlice for i8 {
    fn slice(b: &Buffer) -> &[i8] {
        match b {
            Buffer::I8(v) => v,
            _ => unreachable!("dtype checked before dispatch"),
        }
    }
}

/// Verifies that an operand matches the input type of `format`.
pub(crate) fn check_operand(m: &DenseMatrix, format: NumericFormat) -> Result<()> {
    if m.dtype() != format.input() {
        return Err(Error::DTypeMismatch { expected: format.input(), found: m.dtype() });
    }
    Ok(())
}

/// Dispatches a generic kernel on the MAC type of `format`.
macro_rules! with_mac {
    ($format:expr, $mac:ident => $body:expr) => {{
        use $crate::tensor::format::DType;
        match ($format.input(), $format.accumulator()) {
            (DType::Int8, _) => {
                type $mac = $crate::tensor::gemm::MacI32;
                $body
            }
            (_, DType::Fp16) => {
                type $mac = $crate::tensor::gemm::MacF16;
                $body
            }
            _ => {
                type $mac = $crate::tensor::gemm::MacF32;
                $body
            }
        }
    }};
}
pub(crate) use with_mac;

/// Reference dense GEMM: `C[i][j] = sum_k a[i][k] * b[k][j]`, summed over
/// ascending `k` with the accumulation semantics of `format`.
pub fn gemm_dense(a: &DenseMatrix, b: &DenseMatrix, format: NumericFormat) -> Result<DenseMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "gemm",
            left: (a.rows(), a.cols()),
            right: (b.rows(), b.cols()),
        });
    }
    check_operand(a, format)?;
    check_operand(b, format)?;
    let data = with_mac!(format, M => triple_loop::<M>(a, b));
    DenseMatrix::new(a.rows(), b.cols(), format.accumulator(), data)
}

fn triple_loop<M: Mac>(a: &DenseMatrix, b: &DenseMatrix) -> Buffer
where
    M::In: InSlice,
    M::Acc: AccBuffer,
{
    let (rows, inner, cols) = (a.rows(), a.cols(), b.cols());
    let av = M::In::slice(a.data());
    let bv = M::In::slice(b.data());
    let mut out = vec![M::Acc::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = M::Acc::ZERO;
            for k in 0..inner {
                acc = M::mac(acc, av[i * inner + k], bv[k * cols + j]);
            }
            out[i * cols + j] = acc;
        }
    }
    M::Acc::wrap(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn mat(rows: usize, cols: usize, dtype: DType, v: &[f64]) -> DenseMatrix {
        DenseMatrix::from_f64_rounded(rows, cols, dtype, v).unwrap()
    }

    #[test]
    fn identity_left_operand() {
        let b: Vec<f64> = (0..12).map(|i| i as f64 - 5.0).collect();
        for f in NumericFormat::ALL {
            let i4 = DenseMatrix::identity(4, f.input());
            let bm = mat(4, 3, f.input(), &b);
            let c = gemm_dense(&i4, &bm, f).unwrap();
            assert_eq!(c.to_f64_vec(), bm.to_f64_vec(), "{f}");
            assert_eq!(c.dtype(), f.accumulator());
        }
    }

    #[test]
    fn zeros_times_ones() {
        let a = DenseMatrix::zeros(2, 4, DType::Fp16);
        let b = mat(4, 2, DType::Fp16, &[1.0; 8]);
        let c = gemm_dense(&a, &b, NumericFormat::FP16).unwrap();
        assert_eq!(c.to_f64_vec(), vec![0.0; 4]);
    }

    #[test]
    fn shape_and_dtype_errors() {
        let a = DenseMatrix::zeros(2, 3, DType::Int8);
        let b = DenseMatrix::zeros(4, 2, DType::Int8);
        assert!(matches!(gemm_dense(&a, &b, NumericFormat::INT8), Err(Error::ShapeMismatch { .. })));
        let b = DenseMatrix::zeros(3, 2, DType::Fp16);
        assert!(matches!(gemm_dense(&a, &b, NumericFormat::INT8), Err(Error::DTypeMismatch { .. })));
    }

    #[test]
    fn fp16_accumulate_rounds_each_step() {
        // 2048 + 1 is not representable in fp16 (spacing 2 above 2048), so a
        // running fp16 sum of 2048 ones followed by more ones stalls at 2048.
        let k = 2050;
        let a = mat(1, k, DType::Fp16, &vec![1.0; k]);
        let b = mat(k, 1, DType::Fp16, &vec![1.0; k]);
        let c16 = gemm_dense(&a, &b, NumericFormat::FP16_ACC16).unwrap();
        assert_eq!(c16.get_f64(0, 0), 2048.0);
        let c32 = gemm_dense(&a, &b, NumericFormat::FP16).unwrap();
        assert_eq!(c32.get_f64(0, 0), 2050.0);
    }

    #[test]
    fn sparse_shape_rules() {
        let p = NMPattern::TWO_FOUR;
        assert!(GemmShape::new(8, 8, 48).validate_sparse(NumericFormat::FP16, p).is_ok());
        assert!(GemmShape::new(8, 8, 48).validate_sparse(NumericFormat::INT8, p).is_err());
        assert!(GemmShape::new(8, 8, 64).validate_sparse(NumericFormat::INT8, p).is_ok());
        assert!(matches!(
            GemmShape::new(8, 8, 64).validate_sparse(NumericFormat::FP32, p),
            Err(Error::NoSparseMode(_))
        ));
        assert_eq!("64x32x1024".parse::<GemmShape>().unwrap(), GemmShape::new(64, 32, 1024));
    }
}
