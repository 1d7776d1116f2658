//! Parameter initialisation.

use rand::Rng;

use super::rng;
use super::tensor::Tensor;

/// Xavier/Glorot uniform: `U(−√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out)))`
/// with `fan_in = shape[0]`, `fan_out = shape[1..].product()`.
pub fn xavier_uniform(shape: &[usize], seed: u64) -> Tensor {
    let fan_in = shape.first().copied().unwrap_or(1);
    let fan_out: usize = shape.iter().skip(1).product();
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let mut r = rng::stream(seed, "xavier", 0);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
