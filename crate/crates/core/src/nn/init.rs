//! Seeded weight initializers. Sampling draws f64 values and narrows to the
//! target scalar so f32 and f64 instantiations see the same draw sequence.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::Scalar;

/// Kaiming-uniform for conv/linear weights feeding a LeakyReLU with the
/// given negative slope. `fan_in` is `cin * k * k` for convolutions.
pub fn kaiming_uniform<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, slope: f64) -> ArrayD<F> {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    sample(rng, shape, |r| r.random_range(-bound..bound))
}

/// Zero-mean normal initialization (patch-discriminator convention).
pub fn normal<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<F> {
    let dist = rand_distr::Normal::new(0.0f64, std).expect("std must be positive");
    sample(rng, shape, |r| r.sample(dist))
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::one())
}

fn sample<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], mut draw: impl FnMut(&mut R) -> f64) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::from_f64(draw(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length agree")
}
