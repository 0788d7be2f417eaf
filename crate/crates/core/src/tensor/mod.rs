//! Numeric formats, the dense matrix container and GEMM bookkeeping.

pub mod format;
pub mod gemm;
pub mod matrix;
pub mod pattern;

pub use format::{round_to_format, DType, NumericFormat};
pub use gemm::{gemm_dense, GemmShape};
pub use matrix::{Buffer, DenseMatrix, Element};
pub use pattern::NMPattern;
