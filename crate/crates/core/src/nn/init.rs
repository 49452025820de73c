use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform samples in `±sqrt(6 / (fan_in + fan_out))`.
///
/// Samples are drawn in `f64` and rounded, so `f32` and `f64` models built
/// from the same stream hold the same values up to rounding.
pub fn glorot_uniform<T: Real>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let bound = glorot_bound(fan_in, fan_out);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches sample count")
}

pub fn init_params<T: Real>(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Tensor<T> {
    glorot_uniform(shape, fan_in, fan_out, &mut ChaCha8Rng::seed_from_u64(seed))
}
