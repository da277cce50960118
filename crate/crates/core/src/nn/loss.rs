//! Reconstruction and classification losses with hand-derived gradients.

use ndarray::Array2;

use super::softmax::softmax;
use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

/// Mean squared error, optionally weighted per element.
///
/// Unweighted: plain mean over every element. Weighted: the sum of
/// `w * (pred - target)^2` divided by the sum of the weights, so the value is
/// a mean over the selected region rather than the full tensor.
pub fn mse_loss<F: Scalar>(
    pred: &Array2<F>,
    target: &Array2<F>,
    weights: Option<&Array2<F>>,
) -> Result<F> {
    check_mse_inputs(pred, target, weights)?;
    let denom = mse_denominator(pred, weights)?;
    let mut acc = F::zero();
    match weights {
        None => {
            for (p, t) in pred.iter().zip(target.iter()) {
                let d = *p - *t;
                acc += d * d;
            }
        }
        Some(w) => {
            for ((p, t), wi) in pred.iter().zip(target.iter()).zip(w.iter()) {
                let d = *p - *t;
                acc += *wi * d * d;
            }
        }
    }
    Ok(acc / denom)
}

/// Gradient of [`mse_loss`] with respect to `pred`:
/// `2 * w * (pred - target) / sum(w)` (unweighted: `w = 1`, sum = numel).
pub fn mse_loss_backward<F: Scalar>(
    pred: &Array2<F>,
    target: &Array2<F>,
    weights: Option<&Array2<F>>,
) -> Result<Array2<F>> {
    check_mse_inputs(pred, target, weights)?;
    let denom = mse_denominator(pred, weights)?;
    let two = sc::<F>(2.0);
    let mut grad = pred - target;
    if let Some(w) = weights {
        grad = grad * w;
    }
    grad.mapv_inplace(|g| two * g / denom);
    Ok(grad)
}

fn check_mse_inputs<F: Scalar>(
    pred: &Array2<F>,
    target: &Array2<F>,
    weights: Option<&Array2<F>>,
) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Validation(format!(
            "mse shape mismatch: pred {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if let Some(w) = weights {
        if w.dim() != pred.dim() {
            return Err(Error::Validation(format!(
                "mse weight shape {:?} does not match pred {:?}",
                w.dim(),
                pred.dim()
            )));
        }
        if w.iter().any(|x| !x.is_finite() || *x < F::zero()) {
            return Err(Error::Validation(
                "mse weights must be finite and nonnegative".into(),
            ));
        }
    }
    Ok(())
}

fn mse_denominator<F: Scalar>(pred: &Array2<F>, weights: Option<&Array2<F>>) -> Result<F> {
    let denom = match weights {
        None => sc::<F>(pred.len() as f64),
        Some(w) => w.iter().copied().sum(),
    };
    if denom <= F::zero() {
        return Err(Error::Validation(
            "mse weights sum to zero: nothing selected".into(),
        ));
    }
    Ok(denom)
}

/// Target for a sample whose label is a convex mix of two classes.
/// A plain hard label is `lam = 1` with both slots equal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedLabel<F> {
    pub first: usize,
    pub second: usize,
    /// Weight on `first`; `second` gets `1 - lam`.
    pub lam: F,
}

impl<F: Scalar> MixedLabel<F> {
    pub fn hard(class: usize) -> Self {
        Self { first: class, second: class, lam: F::one() }
    }

    pub fn mixed(first: usize, second: usize, lam: F) -> Self {
        Self { first, second, lam }
    }
}

/// Batch-mean cross entropy against hard labels. Returns `(loss, dlogits)`.
pub fn cross_entropy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> Result<(F, Array2<F>)> {
    let mixed: Vec<MixedLabel<F>> = labels.iter().map(|&c| MixedLabel::hard(c)).collect();
    cross_entropy_mixed(logits, &mixed)
}

/// Batch-mean cross entropy against mixed labels:
/// `lam * CE(first) + (1 - lam) * CE(second)` per sample.
pub fn cross_entropy_mixed<F: Scalar>(
    logits: &Array2<F>,
    labels: &[MixedLabel<F>],
) -> Result<(F, Array2<F>)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::Validation(format!(
            "{} labels for {b} logit rows",
            labels.len()
        )));
    }
    if b == 0 {
        return Err(Error::Validation("cross entropy over empty batch".into()));
    }
    for ml in labels {
        if ml.first >= c || ml.second >= c {
            return Err(Error::Validation(format!(
                "label out of range for {c} classes: {ml:?}"
            )));
        }
        let lam = ml.lam.to_f64_lossy();
        if !(0.0..=1.0).contains(&lam) {
            return Err(Error::Validation(format!("mix weight {lam} outside [0, 1]")));
        }
    }

    let inv_b = sc::<F>(1.0 / b as f64);
    let mut loss = F::zero();
    let mut dlogits = Array2::zeros((b, c));
    for (i, ml) in labels.iter().enumerate() {
        let row: Vec<F> = logits.row(i).to_vec();
        let probs = softmax(&row);
        let one = F::one();
        // -log p under each target, mixed.
        loss += -(ml.lam * probs[ml.first].max(F::min_positive_value()).ln()
            + (one - ml.lam) * probs[ml.second].max(F::min_positive_value()).ln());
        // d/dlogit = softmax - mixed one-hot, averaged over the batch.
        for (j, p) in probs.iter().enumerate() {
            let mut g = *p;
            if j == ml.first {
                g -= ml.lam;
            }
            if j == ml.second {
                g -= one - ml.lam;
            }
            dlogits[(i, j)] = g * inv_b;
        }
    }
    Ok((loss * inv_b, dlogits))
}

/// Row-wise argmax for accuracy reporting. Ties go to the smaller index.
pub fn argmax_rows<F: Scalar>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| argmax(&row.to_vec()))
        .collect()
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let preds = argmax_rows(logits);
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
