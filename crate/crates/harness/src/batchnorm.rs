//! Per-channel batch normalization for `[batch, channels, height, width]` maps.

use mra_core::nn::params::{ParamMut, ParamRef, ParamSet};
use mra_core::nn::init;
use mra_core::scalar::{sc, Scalar};
use mra_core::{Error, Result};
use ndarray::{Array1, Array4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Learnable scale/shift plus running statistics. Only `gamma`/`beta` are
/// optimizer parameters; the running statistics are model state updated as a
/// side effect of training-mode forwards and used verbatim at eval time.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

pub struct BnCache<F> {
    xhat: Array4<F>,
    rstd: Array1<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn init(channels: usize) -> Self {
        BatchNorm2d {
            gamma: init::ones1(channels),
            beta: init::zeros1(channels),
            running_mean: init::zeros1(channels),
            running_var: init::ones1(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, x: &Array4<F>) -> Result<usize> {
        let (bsz, c, h, w) = x.dim();
        if c != self.channels() {
            return Err(Error::geometry(format!(
                "input has {c} channels, normalization expects {}",
                self.channels()
            )));
        }
        Ok(bsz * h * w)
    }

    /// Normalizes with batch statistics and folds them into the running
    /// estimates (biased variance in the output, unbiased in the estimate).
    pub fn forward_train(&mut self, x: &Array4<F>) -> Result<(Array4<F>, BnCache<F>)> {
        let m = self.check_input(x)?;
        if m < 2 {
            return Err(Error::validation(format!(
                "batch statistics need at least 2 values per channel, got {m}"
            )));
        }
        let c_n = self.channels();
        let inv_m = sc::<F>(1.0 / m as f64);
        let mut mean = Array1::<F>::zeros(c_n);
        let mut var = Array1::<F>::zeros(c_n);
        for ((_, c, _, _), v) in x.indexed_iter() {
            mean[c] += *v;
        }
        mean.mapv_inplace(|v| v * inv_m);
        for ((_, c, _, _), v) in x.indexed_iter() {
            let d = *v - mean[c];
            var[c] += d * d;
        }
        var.mapv_inplace(|v| v * inv_m);

        let rstd = var.mapv(|v| (v + sc::<F>(BN_EPS)).sqrt().recip());
        let mut xhat = x.clone();
        for ((_, c, _, _), v) in xhat.indexed_iter_mut() {
            *v = (*v - mean[c]) * rstd[c];
        }
        let mut y = xhat.clone();
        for ((_, c, _, _), v) in y.indexed_iter_mut() {
            *v = *v * self.gamma[c] + self.beta[c];
        }

        let mom = sc::<F>(BN_MOMENTUM);
        let keep = sc::<F>(1.0 - BN_MOMENTUM);
        let bessel = sc::<F>(m as f64 / (m - 1) as f64);
        for c in 0..c_n {
            self.running_mean[c] = keep * self.running_mean[c] + mom * mean[c];
            self.running_var[c] = keep * self.running_var[c] + mom * var[c] * bessel;
        }
        Ok((y, BnCache { xhat, rstd }))
    }

    /// Normalizes with the running statistics; no state changes.
    pub fn forward_eval(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check_input(x)?;
        let rstd = self.running_var.mapv(|v| (v + sc::<F>(BN_EPS)).sqrt().recip());
        let mut y = x.clone();
        for ((_, c, _, _), v) in y.indexed_iter_mut() {
            *v = (*v - self.running_mean[c]) * rstd[c] * self.gamma[c] + self.beta[c];
        }
        Ok(y)
    }

    /// Accumulates into `grad`, returns the input gradient for the
    /// training-mode forward (batch statistics treated as functions of x).
    pub fn backward(&self, cache: &BnCache<F>, dy: &Array4<F>, grad: &mut Self) -> Array4<F> {
        let (bsz, c_n, h, w) = cache.xhat.dim();
        let m = sc::<F>((bsz * h * w) as f64);
        let mut sum_dy = Array1::<F>::zeros(c_n);
        let mut sum_dy_xhat = Array1::<F>::zeros(c_n);
        for ((_, c, _, _), (d, xh)) in dy.indexed_iter().map(|(i, d)| (i, (*d, cache.xhat[i]))) {
            sum_dy[c] += d;
            sum_dy_xhat[c] += d * xh;
        }
        for c in 0..c_n {
            grad.gamma[c] += sum_dy_xhat[c];
            grad.beta[c] += sum_dy[c];
        }
        let mut dx = Array4::<F>::zeros(cache.xhat.dim());
        for (i, v) in dx.indexed_iter_mut() {
            let c = i.1;
            let term = m * dy[i] - sum_dy[c] - cache.xhat[i] * sum_dy_xhat[c];
            *v = self.gamma[c] * cache.rstd[c] / m * term;
        }
        dx
    }
}

pub fn visit_bn<F: Scalar>(bn: &BatchNorm2d<F>, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_, F>)) {
    f(&format!("{prefix}.gamma"), ParamRef::Vector(&bn.gamma));
    f(&format!("{prefix}.beta"), ParamRef::Vector(&bn.beta));
}

pub fn visit_bn_mut<F: Scalar>(
    bn: &mut BatchNorm2d<F>,
    prefix: &str,
    f: &mut dyn FnMut(&str, ParamMut<'_, F>),
) {
    f(&format!("{prefix}.gamma"), ParamMut::Vector(&mut bn.gamma));
    f(&format!("{prefix}.beta"), ParamMut::Vector(&mut bn.beta));
}

impl<F: Scalar> ParamSet<F> for BatchNorm2d<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamRef<'_, F>)) {
        visit_bn(self, "bn", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_, F>)) {
        visit_bn_mut(self, "bn", f);
    }
}
