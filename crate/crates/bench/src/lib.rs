//! Seeded inputs shared by the kernel benchmarks.

use arwlab_core::losses::EmbeddingBatch;
use arwlab_core::{Matrix, RngStream};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed);
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::new(rows, cols, data).expect("shape matches data")
}

pub fn embedding_batch(
    speakers: usize,
    utterances: usize,
    dim: usize,
    seed: u64,
) -> EmbeddingBatch {
    EmbeddingBatch::new(
        speakers,
        utterances,
        gaussian(speakers * utterances, dim, seed),
    )
    .expect("valid batch")
}

/// Genuine scores centred at 1, impostor scores at 0, unit variance.
pub fn score_sets(genuine: usize, impostor: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = RngStream::new(seed);
    let g = (0..genuine).map(|_| 1.0 + rng.normal()).collect();
    let i = (0..impostor).map(|_| rng.normal()).collect();
    (g, i)
}
