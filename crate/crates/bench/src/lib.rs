//! Deterministic fixtures for the calibration benchmarks.

use clcp::{LambdaGrid, LossMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n × grid_len` loss matrix whose rows step down from 1 to 0 at a random
/// grid position, like miscoverage under a threshold family.
pub fn step_loss_matrix(seed: u64, n: usize, grid_len: usize) -> LossMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = LambdaGrid::arithmetic(0.0, 1.0, 1.0 / (grid_len - 1) as f64).expect("valid grid");
    let mut entries = vec![0.0; n * grid_len];
    let cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..grid_len)).collect();
    for j in 0..grid_len {
        for (i, &cut) in cuts.iter().enumerate() {
            entries[j * n + i] = if j < cut { 1.0 } else { 0.0 };
        }
    }
    LossMatrix::from_column_major(entries, n, grid, 1.0).expect("valid matrix")
}

/// Uniform values in `[0, 1)`.
pub fn uniform_values(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}
