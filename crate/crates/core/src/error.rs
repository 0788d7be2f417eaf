use thiserror::Error;

use crate::tensor::{DType, NumericFormat};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("buffer length {found} does not match shape (expected {expected})")]
    LengthMismatch { expected: usize, found: usize },

    #[error("dimension overflow")]
    Overflow,

    #[error("expected dtype {expected}, found {found}")]
    DTypeMismatch { expected: DType, found: DType },

    #[error("value {value} is not representable in {dtype}")]
    Unrepresentable { value: f64, dtype: DType },

    #[error("format pair {input}/{accumulator} is not supported")]
    UnsupportedFormat { input: DType, accumulator: DType },

    #[error("format {0} has no sparse mode")]
    NoSparseMode(NumericFormat),

    #[error("invalid pattern {n}:{m} (need 0 < n < m <= 256)")]
    InvalidPattern { n: usize, m: usize },

    #[error("{what} = {value} is not a multiple of {multiple}")]
    NotMultiple {
        what: &'static str,
        value: usize,
        multiple: usize,
    },

    #[error("row {row}, group {group} has {nonzeros} nonzeros (pattern allows {allowed})")]
    NonConforming {
        row: usize,
        group: usize,
        nonzeros: usize,
        allowed: usize,
    },

    #[error("malformed metadata at row {row}, group {group}: {reason}")]
    MalformedMetadata {
        row: usize,
        group: usize,
        reason: &'static str,
    },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("search space of {0} candidates is too large for exhaustive search")]
    SearchTooLarge(u128),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("empty calibration stream")]
    EmptyStream,

    #[error("percentile {0} is outside (0, 100]")]
    InvalidPercentile(f64),

    #[error("scale set does not match tensor: {0}")]
    GranularityMismatch(String),

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Diverged { epoch: usize },

    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),

    #[error("invalid layer manifest: {0}")]
    InvalidManifest(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Archive(#[from] crate::archive::ArchiveError),
}
