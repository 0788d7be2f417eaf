//! N:M structured sparsity.
//!
//! - [`tensor`]: numeric formats, dense matrices and the reference GEMM.
//! - [`codec`]: compressed value + metadata storage and conformance checks.
//! - [`spmm`]: sparse x dense GEMM over the compressed operand, plus a benchmark harness.
//! - [`pruner`]: magnitude masks, column-permutation search and transposable masks.
//! - [`quant`]: INT8 calibration (max, percentile, entropy) and quantized sparse GEMM.
//! - [`workflow`]: a small fully-connected trainer running train, prune, retrain,
//!   layer-eligibility rules and multi-phase recipes.
//! - [`archive`]: the `S24T` binary tensor archive.
//!
//! Data-parallel loops run on rayon when the `parallel` feature (default) is
//! enabled and fall back to sequential loops otherwise. Results are identical
//! either way.

pub mod archive;
pub mod codec;
pub mod error;
pub mod gen;
pub mod par;
pub mod pruner;
pub mod quant;
pub mod spmm;
pub mod tensor;
pub mod workflow;

pub use codec::{check_conformance, compress, decompress, storage_bits, Axis, Mask, SparseNM};
pub use error::{Error, Result};
pub use spmm::{spmm, spmm_flops, SpmmPlan};
pub use tensor::{gemm_dense, round_to_format, DType, DenseMatrix, GemmShape, NMPattern, NumericFormat};
