//! Pointwise activations with matching derivatives.

use ndarray::Array2;

use crate::scalar::{sc, Scalar};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let half = sc::<F>(0.5);
    let c = sc::<F>(GELU_C);
    let a = sc::<F>(GELU_A);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

/// d gelu / dx at `x`.
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = sc::<F>(0.5);
    let c = sc::<F>(GELU_C);
    let a = sc::<F>(GELU_A);
    let three = sc::<F>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + three * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

pub fn gelu_rows<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    x.mapv(gelu)
}

/// Backward through elementwise GELU given the pre-activation input.
pub fn gelu_rows_backward<F: Scalar>(pre: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = pre.mapv(gelu_grad);
    dx *= dy;
    dx
}

pub fn relu<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

pub fn relu_grad<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else {
        F::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn gelu_known_values() {
        // gelu(0) = 0; gelu is odd-symmetric around x -> -x up to the linear term.
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841192).abs() < 1e-5);
    }
}
