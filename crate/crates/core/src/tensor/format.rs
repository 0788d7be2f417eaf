//! Element types, Tensor Core operand/accumulator pairs and scalar rounding.

use std::fmt;
use std::str::FromStr;

use half::{bf16, f16};

use crate::error::{Error, Result};

/// Storage type of a single matrix element.
///
/// Float types are held in memory as `f32` values that are exactly
/// representable in the narrower format; `Int8` is held as `i8` and
/// `Int32` (accumulator output only) as `i32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    Fp32,
    Tf32,
    Fp16,
    Bf16,
    Int8,
    Int32,
}

impl DType {
    pub const ALL: [DType; 6] = [
        DType::Fp32,
        DType::Tf32,
        DType::Fp16,
        DType::Bf16,
        DType::Int8,
        DType::Int32,
    ];

    /// Width in bits of one stored element. TF32 occupies a 32-bit container.
    pub fn bits(self) -> u64 {
        match self {
            DType::Fp32 | DType::Tf32 | DType::Int32 => 32,
            DType::Fp16 | DType::Bf16 => 16,
            DType::Int8 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        !matches!(self, DType::Int8 | DType::Int32)
    }

    /// Stable one-byte tag used by the archive format.
    pub fn tag(self) -> u8 {
        match self {
            DType::Fp32 => 0,
            DType::Tf32 => 1,
            DType::Fp16 => 2,
            DType::Bf16 => 3,
            DType::Int8 => 4,
            DType::Int32 => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        DType::ALL.into_iter().find(|d| d.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Fp32 => "fp32",
            DType::Tf32 => "tf32",
            DType::Fp16 => "fp16",
            DType::Bf16 => "bf16",
            DType::Int8 => "int8",
            DType::Int32 => "int32",
        }
    }

    /// Distance between `x` and the next representable value away from zero.
    /// Used for float tolerance bounds.
    pub fn ulp(self, x: f64) -> f64 {
        let mantissa_bits: i32 = match self {
            DType::Fp32 => 23,
            DType::Tf32 => 10,
            DType::Fp16 => 10,
            DType::Bf16 => 7,
            DType::Int8 | DType::Int32 => return 1.0,
        };
        let min_exp: i32 = match self {
            DType::Fp16 => -14,
            _ => -126,
        };
        let ax = x.abs();
        let exp = if ax == 0.0 || !ax.is_finite() {
            min_exp
        } else {
            (ax.log2().floor() as i32).max(min_exp)
        };
        2f64.powi(exp - mantissa_bits)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DType::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown dtype '{s}'")))
    }
}

/// An (input operands, accumulator) pair supported by the matrix units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NumericFormat {
    input: DType,
    accumulator: DType,
}

impl NumericFormat {
    pub const FP32: NumericFormat = NumericFormat { input: DType::Fp32, accumulator: DType::Fp32 };
    pub const TF32: NumericFormat = NumericFormat { input: DType::Tf32, accumulator: DType::Fp32 };
    pub const FP16: NumericFormat = NumericFormat { input: DType::Fp16, accumulator: DType::Fp32 };
    pub const BF16: NumericFormat = NumericFormat { input: DType::Bf16, accumulator: DType::Fp32 };
    pub const FP16_ACC16: NumericFormat = NumericFormat { input: DType::Fp16, accumulator: DType::Fp16 };
    pub const INT8: NumericFormat = NumericFormat { input: DType::Int8, accumulator: DType::Int32 };

    /// Every supported pair, in table order.
    pub const ALL: [NumericFormat; 6] = [
        Self::FP32,
        Self::TF32,
        Self::FP16,
        Self::BF16,
        Self::FP16_ACC16,
        Self::INT8,
    ];

    pub fn new(input: DType, accumulator: DType) -> Result<Self> {
        let f = NumericFormat { input, accumulator };
        if Self::ALL.contains(&f) {
            Ok(f)
        } else {
            Err(Error::UnsupportedFormat { input, accumulator })
        }
    }

    /// The default pairing for an input type (FP16 pairs with FP32 accumulation).
    pub fn for_input(input: DType) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.input == input)
            .ok_or(Error::UnsupportedFormat { input, accumulator: input })
    }

    pub fn input(self) -> DType {
        self.input
    }

    pub fn accumulator(self) -> DType {
        self.accumulator
    }

    /// FP32/FP32 has no sparse mode; every other pair does.
    pub fn is_sparse_eligible(self) -> bool {
        self != Self::FP32
    }

    /// Required multiple for the contracted dimension of a sparse GEMM.
    ///
    /// 16 for 16-bit inputs and 32 for INT8. TF32 uses 8, keeping the same
    /// 32-byte alignment as the other rows. `None` when no sparse mode exists.
    pub fn sparse_k_multiple(self) -> Option<usize> {
        if !self.is_sparse_eligible() {
            return None;
        }
        Some(match self.input {
            DType::Fp16 | DType::Bf16 => 16,
            DType::Int8 => 32,
            DType::Tf32 => 8,
            DType::Fp32 | DType::Int32 => unreachable!("not a sparse input type"),
        })
    }
}

impl fmt::Display for NumericFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.input, self.accumulator)
    }
}

impl FromStr for NumericFormat {
    type Err = Error;

    /// Accepts `int8`, `fp16`, `fp16/fp16`, `tf32/fp32`, ...
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('/') {
            Some((i, a)) => NumericFormat::new(i.trim().parse()?, a.trim().parse()?),
            None => NumericFormat::for_input(s.trim().parse()?),
        }
    }
}

/// Rounds `x` to the nearest value representable in `dtype`, ties to even.
///
/// Integer types saturate; NaN maps to zero for them.
pub fn round_to_format(x: f64, dtype: DType) -> f64 {
    match dtype {
        DType::Fp32 => x as f32 as f64,
        DType::Tf32 => round_mantissa(x, 10) as f32 as f64,
        DType::Fp16 => f16::from_f64(x).to_f64(),
        DType::Bf16 => bf16::from_f64(x).to_f64(),
        DType::Int8 => saturate(x, i8::MIN as f64, i8::MAX as f64),
        DType::Int32 => saturate(x, i32::MIN as f64, i32::MAX as f64),
    }
}

fn saturate(x: f64, lo: f64, hi: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.round_ties_even().clamp(lo, hi)
    }
}

/// Round-to-nearest-even of an f64 to `bits` explicit mantissa bits.
fn round_mantissa(x: f64, bits: u32) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let shift = 52 - bits;
    let raw = x.to_bits();
    let lsb = (raw >> shift) & 1;
    let bias = (1u64 << (shift - 1)) - 1 + lsb;
    f64::from_bits((raw + bias) & !((1u64 << shift) - 1))
}

/// Rounds an exact intermediate result into fp16, returned in its f32 container.
#[inline]
pub(crate) fn to_fp16(x: f64) -> f32 {
    f16::from_f64(x).to_f32()
}
