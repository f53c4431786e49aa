//! Seeded weight initializers. All randomness flows through an explicit
//! ChaCha RNG handed down from the trainer, so model construction is
//! deterministic given the run seed.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He/Kaiming normal, std = √(2 / fan_in): convolutions and linears that
/// feed ReLU.
pub fn kaiming_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

/// Glorot/Xavier uniform, limit = √(6 / (fan_in + fan_out)): attention and
/// projection linears.
pub fn xavier_uniform(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> ArrayD<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-limit..limit))
}

/// Small-std normal (0.02), the usual choice for transformer tables such as
/// relative position biases.
pub fn normal_002(rng: &mut impl Rng, shape: &[usize]) -> ArrayD<f64> {
    let dist = Normal::new(0.0, 0.02).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}
