//! Numerically stable softmax.

use ndarray::Array2;

use crate::scalar::Scalar;

/// Softmax of a score vector, computed with max-subtraction.
/// Outputs are positive and sum to 1 on any finite input.
pub fn softmax<F: Scalar>(scores: &[F]) -> Vec<F> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax over a matrix.
pub fn softmax_rows<F: Scalar>(scores: &Array2<F>) -> Array2<F> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|s| (s - max).exp());
        let total: F = row.iter().copied().sum();
        row.mapv_inplace(|e| e / total);
    }
    out
}

/// Backward through a row-wise softmax: `dS = P * (dP - rowsum(dP * P))`.
pub fn softmax_rows_backward<F: Scalar>(probs: &Array2<F>, dprobs: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(probs.raw_dim());
    for (mut orow, (prow, drow)) in out
        .rows_mut()
        .into_iter()
        .zip(probs.rows().into_iter().zip(dprobs.rows()))
    {
        let dot: F = prow.iter().zip(drow.iter()).map(|(&p, &d)| p * d).sum();
        for ((o, &p), &d) in orow.iter_mut().zip(prow.iter()).zip(drow.iter()) {
            *o = p * (d - dot);
        }
    }
    out
}
