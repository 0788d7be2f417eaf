//! Seeded random matrices for benches, demos and tests.

use rand::seq::index::sample;
use rand::Rng;

use crate::tensor::{DType, DenseMatrix, NMPattern};

/// Uniform values in `[-1, 1)` rounded to `dtype`; integers use `[-127, 127]`.
pub fn random_dense<R: Rng + ?Sized>(rows: usize, cols: usize, dtype: DType, rng: &mut R) -> DenseMatrix {
    let values: Vec<f64> = (0..rows * cols).map(|_| random_value(dtype, rng)).collect();
    DenseMatrix::from_f64_rounded(rows, cols, dtype, &values).expect("rounded values are representable")
}

/// A random matrix in which every aligned row group keeps `n` random positions
/// (which may themselves be zero); all other positions are zero.
pub fn random_conforming<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    dtype: DType,
    pattern: NMPattern,
    rng: &mut R,
) -> DenseMatrix {
    let (n, m) = (pattern.n(), pattern.m());
    let mut values = vec![0.0; rows * cols];
    for r in 0..rows {
        for g in 0..cols / m {
            let keep = rng.random_range(0..=n);
            for i in sample(rng, m, keep) {
                values[r * cols + g * m + i] = random_value(dtype, rng);
            }
        }
    }
    DenseMatrix::from_f64_rounded(rows, cols, dtype, &values).expect("rounded values are representable")
}

fn random_value<R: Rng + ?Sized>(dtype: DType, rng: &mut R) -> f64 {
    match dtype {
        DType::Int8 => rng.random_range(-127..=127) as f64,
        DType::Int32 => rng.random_range(-1000..=1000) as f64,
        _ => rng.random_range(-1.0..1.0),
    }
}
