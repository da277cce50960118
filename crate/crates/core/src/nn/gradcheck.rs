//! Central finite-difference verification of hand-derived gradients.
//!
//! Contract: 64-bit scalars, step 1e-5, and relative error below 1e-4 where
//! `rel = |analytic - fd| / max(|analytic|, |fd|, 1e-6)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{name_of_flat_index, param_count, set_flat_element, ParamSet};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(tensor element, analytic, finite difference)` for the worst index.
    pub worst: Option<(String, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < FD_TOL
    }
}

fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR)
}

/// Compares `analytic` (flat, visit order) against central differences of
/// `loss_fn` at the listed flat indices. The parameter set is perturbed in
/// place and restored exactly after each probe.
pub fn gradient_check<P: ParamSet<f64>>(
    params: &mut P,
    analytic: &[f64],
    indices: &[usize],
    mut loss_fn: impl FnMut(&P) -> f64,
) -> Result<GradCheckReport> {
    let total = param_count(params);
    if analytic.len() != total {
        return Err(Error::Validation(format!(
            "analytic gradient has {} entries, model has {total} parameters",
            analytic.len()
        )));
    }
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for &i in indices {
        if i >= total {
            return Err(Error::Validation(format!(
                "gradient check index {i} out of range ({total} parameters)"
            )));
        }
        // Read by overwriting with a placeholder, then probe both sides.
        let old = set_flat_element(params, i, 0.0);
        set_flat_element(params, i, old + FD_STEP);
        let lp = loss_fn(params);
        set_flat_element(params, i, old - FD_STEP);
        let lm = loss_fn(params);
        set_flat_element(params, i, old);

        let fd = (lp - lm) / (2.0 * FD_STEP);
        let rel = rel_err(analytic[i], fd);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((name_of_flat_index(params, i), analytic[i], fd));
        }
    }
    Ok(report)
}

/// [`gradient_check`] over every parameter.
pub fn gradient_check_full<P: ParamSet<f64>>(
    params: &mut P,
    analytic: &[f64],
    loss_fn: impl FnMut(&P) -> f64,
) -> Result<GradCheckReport> {
    let indices: Vec<usize> = (0..param_count(params)).collect();
    gradient_check(params, analytic, &indices, loss_fn)
}

/// Deterministic index subsample for models too large to probe exhaustively.
pub fn subsample_indices(total: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= total {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..total).collect();
    all.shuffle(&mut rng);
    let mut picked: Vec<usize> = all.into_iter().take(count).collect();
    picked.sort_unstable();
    picked
}

/// Errors with a diagnostic naming the worst element unless the report passes.
pub fn require_pass(report: &GradCheckReport, what: &str) -> Result<()> {
    if report.passes() {
        return Ok(());
    }
    let detail = match &report.worst {
        Some((name, a, fd)) => format!("{name}: analytic {a:.3e} vs fd {fd:.3e}"),
        None => "no elements checked".into(),
    };
    Err(Error::Numeric(format!(
        "gradient check failed for {what}: max rel err {:.3e} over {} elements ({detail})",
        report.max_rel_err, report.checked
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::linear::Linear;
    use crate::nn::loss::{mse_loss, mse_loss_backward};
    use ndarray::Array2;
    use rand::SeedableRng;

    /// End-to-end harness exercise: a linear layer under MSE, every index.
    #[test]
    fn linear_under_mse_passes_full_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layer = Linear::<f64>::init(3, 2, 0.5, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| 0.2 * i as f64 - 0.1 * j as f64 + 0.05);
        let target = Array2::from_shape_fn((4, 2), |(i, j)| 0.1 * (i + j) as f64);

        let y = layer.forward(&x);
        let dy = mse_loss_backward(&y, &target, None).unwrap();
        let mut grad = Linear::zeros(3, 2);
        layer.backward(&x, &dy, &mut grad);
        let analytic = crate::nn::params::flatten(&grad);

        let report = gradient_check_full(&mut layer, &analytic, |l| {
            mse_loss(&l.forward(&x), &target, None).unwrap()
        })
        .unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
        require_pass(&report, "linear+mse").unwrap();
    }

    #[test]
    fn corrupted_gradient_is_caught_and_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut layer = Linear::<f64>::init(2, 2, 0.5, &mut rng);
        let x = Array2::from_shape_fn((3, 2), |(i, j)| 0.3 * i as f64 + 0.1 * j as f64);
        let target = Array2::zeros((3, 2));

        let y = layer.forward(&x);
        let dy = mse_loss_backward(&y, &target, None).unwrap();
        let mut grad = Linear::zeros(2, 2);
        layer.backward(&x, &dy, &mut grad);
        let mut analytic = crate::nn::params::flatten(&grad);
        analytic[1] += 0.5;

        let report = gradient_check_full(&mut layer, &analytic, |l| {
            mse_loss(&l.forward(&x), &target, None).unwrap()
        })
        .unwrap();
        assert!(!report.passes());
        let (name, _, _) = report.worst.as_ref().unwrap();
        assert!(name.starts_with("linear.weight"), "worst was {name}");
        assert!(require_pass(&report, "corrupted").is_err());
    }

    #[test]
    fn perturbations_are_restored_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut layer = Linear::<f64>::init(3, 3, 0.5, &mut rng);
        let before = crate::nn::params::flatten(&layer);
        let analytic = vec![0.0; before.len()];
        let _ = gradient_check_full(&mut layer, &analytic, |_| 0.0).unwrap();
        let after = crate::nn::params::flatten(&layer);
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn subsample_is_deterministic_sorted_distinct() {
        let a = subsample_indices(1000, 64, 99);
        let b = subsample_indices(1000, 64, 99);
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&i| i < 1000));
        assert_eq!(subsample_indices(10, 64, 1), (0..10).collect::<Vec<_>>());
    }
}
