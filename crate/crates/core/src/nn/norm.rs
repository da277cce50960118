//! Layer normalization over the embedding axis.

use ndarray::{Array1, Array2};

use super::init;
use super::params::{ParamMut, ParamRef, ParamSet};
use crate::scalar::{sc, Scalar};

const LN_EPS: f64 = 1e-6;

/// Per-feature gain and bias; normalization statistics are per token (row).
#[derive(Debug, Clone)]
pub struct LayerNorm<F> {
    pub gain: Array1<F>,
    pub bias: Array1<F>,
}

/// Forward byproducts needed by the backward pass.
pub struct LnCache<F> {
    /// Normalized rows before gain/bias.
    pub xhat: Array2<F>,
    /// Reciprocal standard deviation per row.
    pub rstd: Array1<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn init(dim: usize) -> Self {
        Self { gain: init::ones1(dim), bias: init::zeros1(dim) }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    /// `x: [T, D] -> [T, D]` with per-row mean 0 and unit variance before
    /// gain/bias.
    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LnCache<F>) {
        let (t, d) = x.dim();
        let dn = sc::<F>(d as f64);
        let eps = sc::<F>(LN_EPS);
        let mut xhat = Array2::zeros((t, d));
        let mut rstd = Array1::zeros(t);
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let r = F::one() / (var + eps).sqrt();
            rstd[i] = r;
            for (j, &v) in row.iter().enumerate() {
                xhat[(i, j)] = (v - mean) * r;
            }
        }
        let mut y = xhat.clone();
        y *= &self.gain;
        y += &self.bias;
        (y, LnCache { xhat, rstd })
    }

    /// Accumulates gain/bias gradients; returns `dx`.
    pub fn backward(&self, cache: &LnCache<F>, dy: &Array2<F>, grad: &mut LayerNorm<F>) -> Array2<F> {
        let (t, d) = dy.dim();
        let dn = sc::<F>(d as f64);
        let mut dx = Array2::zeros((t, d));
        for i in 0..t {
            // dgain_j += dy_ij * xhat_ij ; dbias_j += dy_ij
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for j in 0..d {
                let dxhat = dy[(i, j)] * self.gain[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * cache.xhat[(i, j)];
                grad.gain[j] += dy[(i, j)] * cache.xhat[(i, j)];
                grad.bias[j] += dy[(i, j)];
            }
            let mean_dxhat = sum_dxhat / dn;
            let mean_dxhat_xhat = sum_dxhat_xhat / dn;
            for j in 0..d {
                let dxhat = dy[(i, j)] * self.gain[j];
                dx[(i, j)] =
                    cache.rstd[i] * (dxhat - mean_dxhat - cache.xhat[(i, j)] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

pub(crate) fn visit_ln<F: Scalar>(
    l: &LayerNorm<F>,
    prefix: &str,
    f: &mut dyn FnMut(&str, ParamRef<'_, F>),
) {
    f(&format!("{prefix}.gain"), ParamRef::Vector(&l.gain));
    f(&format!("{prefix}.bias"), ParamRef::Vector(&l.bias));
}

pub(crate) fn visit_ln_mut<F: Scalar>(
    l: &mut LayerNorm<F>,
    prefix: &str,
    f: &mut dyn FnMut(&str, ParamMut<'_, F>),
) {
    f(&format!("{prefix}.gain"), ParamMut::Vector(&mut l.gain));
    f(&format!("{prefix}.bias"), ParamMut::Vector(&mut l.bias));
}

impl<F: Scalar> ParamSet<F> for LayerNorm<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamRef<'_, F>)) {
        visit_ln(self, "layer_norm", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_, F>)) {
        visit_ln_mut(self, "layer_norm", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((5, 16), |_| rng.gen_range(-2.0..2.0));
        let ln = LayerNorm::<f64>::init(16);
        let (_, cache) = ln.forward(&x);
        for row in cache.xhat.rows() {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
