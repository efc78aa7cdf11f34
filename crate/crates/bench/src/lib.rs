//! Shared inputs for the benchmarks.

use featloss_core::Tensor;

/// Deterministic pseudo-image batch in [0, 1].
pub fn image_batch(n: usize) -> Tensor {
    Tensor::from_fn(&[n, 1, 28, 28], |i| ((i * 2654435761) % 1009) as f32 / 1008.0)
}

pub fn labels(n: usize) -> Vec<usize> {
    (0..n).map(|i| i % 10).collect()
}
