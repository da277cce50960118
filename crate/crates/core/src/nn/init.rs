//! Parameter initialization.
//!
//! Samples are drawn in `f64` and converted, so an `f32` model and its `f64`
//! gradient-check twin start from the same values (up to rounding).

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::scalar::Scalar;

/// Truncated normal: resample until within two standard deviations.
pub fn trunc_normal<F: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<F> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| {
        loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                return F::from_f64_lossy(x);
            }
        }
    })
}

/// He-normal initialization for convolution/ReLU stacks: std = sqrt(2 / fan_in).
pub fn he_normal<F: Scalar>(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = StandardNormal.sample(rng);
        F::from_f64_lossy(x * std)
    })
}

/// Uniform in [-a, a], used by small test fixtures.
pub fn uniform<F: Scalar>(rows: usize, cols: usize, a: f64, rng: &mut ChaCha8Rng) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| F::from_f64_lossy(rng.gen_range(-a..a)))
}

pub fn zeros1<F: Scalar>(n: usize) -> Array1<F> {
    Array1::zeros(n)
}

pub fn ones1<F: Scalar>(n: usize) -> Array1<F> {
    Array1::from_elem(n, F::one())
}
