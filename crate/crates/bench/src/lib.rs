//! Criterion benchmarks for the hot paths of `l2nnn`; see `benches/`.

use l2nnn::Tensor;

/// Deterministic pseudo-random tensor with entries in `[0, 1)`.
pub fn fixture(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| ((i.wrapping_mul(2654435761) ^ salt) % 10007) as f64 / 10007.0)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
