//! Affine projection `y = x W + b` over rows of token embeddings.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::init;
use super::params::{ParamMut, ParamRef, ParamSet};
use crate::scalar::Scalar;

/// Weight is `[in_dim, out_dim]`; rows of the input are independent tokens.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    /// Truncated-normal weights (std 0.02 unless overridden), zero bias.
    pub fn init(in_dim: usize, out_dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: init::trunc_normal(in_dim, out_dim, std, rng),
            bias: init::zeros1(out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { weight: Array2::zeros((in_dim, out_dim)), bias: init::zeros1(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// `x: [T, in] -> [T, out]`.
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates `dW += x^T dy`, `db += column sums of dy`; returns `dx`.
    pub fn backward(&self, x: &Array2<F>, dy: &Array2<F>, grad: &mut Linear<F>) -> Array2<F> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

/// Visits `{prefix}.weight` then `{prefix}.bias`.
pub(crate) fn visit_linear<F: Scalar>(
    l: &Linear<F>,
    prefix: &str,
    f: &mut dyn FnMut(&str, ParamRef<'_, F>),
) {
    f(&format!("{prefix}.weight"), ParamRef::Matrix(&l.weight));
    f(&format!("{prefix}.bias"), ParamRef::Vector(&l.bias));
}

pub(crate) fn visit_linear_mut<F: Scalar>(
    l: &mut Linear<F>,
    prefix: &str,
    f: &mut dyn FnMut(&str, ParamMut<'_, F>),
) {
    f(&format!("{prefix}.weight"), ParamMut::Matrix(&mut l.weight));
    f(&format!("{prefix}.bias"), ParamMut::Vector(&mut l.bias));
}

impl<F: Scalar> ParamSet<F> for Linear<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamRef<'_, F>)) {
        visit_linear(self, "linear", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_, F>)) {
        visit_linear_mut(self, "linear", f);
    }
}
