//! Parameter initialization.

use rand::Rng;

use super::tensor::Tensor;

/// Uniform fan-in initialization: every element is drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the same rule for weights and
/// biases. Deterministic given the caller's RNG state.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..len)
            .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
            .collect(),
    )
}
