//! Shared inputs for the benchmarks.

use ien_core::{Fill, Tensor};

/// Deterministic standard-normal tensor.
pub fn normal(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::new(shape, Fill::Normal { seed, mean: 0.0, std: 1.0 }).expect("valid shape")
}

/// Deterministic images with pixels in `[0, 1)`.
pub fn images(n: usize, extent: usize, seed: u64) -> Tensor<f32> {
    Tensor::new(&[n, 1, extent, extent], Fill::Uniform { seed, low: 0.0, high: 1.0 }).expect("valid shape")
}
