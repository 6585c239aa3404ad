use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Centered uniform init scaled by fan-in (gain 1): U(-b, b) with
/// b = sqrt(3 / fan_in), giving variance 1 / fan_in.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree by construction")
}
