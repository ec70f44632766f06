//! Parameter initializers.

use rand::Rng;

use crate::tensor::{Tensor, TensorResult};

/// Entries drawn from `U(-bound, bound)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> TensorResult<Tensor> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in` the column count.
pub fn uniform_bound<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> TensorResult<Tensor> {
    let fan_in = shape.get(1).copied().unwrap_or(1).max(1);
    uniform(rng, shape, 1.0 / (fan_in as f64).sqrt())
}
