//! Class-token attention scoring and the visible-patch selection strategies.
//!
//! Scores come from the last encoder block's per-head `q_cls . k_i` dot
//! products, aggregated by arithmetic mean over heads. Selection keeps the
//! top-K (mask the low-attention patches), the bottom-K (mask the high ones),
//! or a uniform random K-subset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::TopKIndexSet;
use crate::nn::attention::AttentionRecord;
use crate::nn::softmax::softmax;
use crate::scalar::{sc, Scalar};

/// How the raw per-head dot products are transformed before aggregation.
/// Selection is invariant to any of these (they are monotone per head in the
/// single-head case); the knob exists for score inspection and dumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Plain dot products.
    #[default]
    Raw,
    /// Dot products divided by sqrt(head_dim).
    Scaled,
    /// Scaled, then softmax-normalized over patches within each head.
    Softmax,
}

/// Per-patch attention of the class token, one score per patch.
#[derive(Debug, Clone)]
pub struct AttentionScores<F> {
    scores: Vec<F>,
    /// Encoder block the record came from.
    pub source_block: usize,
    pub mode: ScoreMode,
}

impl<F: Scalar> AttentionScores<F> {
    pub fn new(scores: Vec<F>, source_block: usize, mode: ScoreMode) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::numeric("non-finite attention score".to_string()));
        }
        Ok(Self { scores, source_block, mode })
    }

    pub fn values(&self) -> &[F] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Computes per-patch class-token scores from a full-visibility record.
///
/// Token 0 is the class token; patch `i` is token `i + 1`. Per head,
/// `score_i = q_cls . k_i` (transformed per `mode`); heads are averaged.
/// The class token's self-score is excluded.
pub fn class_token_scores<F: Scalar>(
    record: &AttentionRecord<F>,
    num_patches: usize,
    mode: ScoreMode,
) -> Result<AttentionScores<F>> {
    if record.num_tokens() != num_patches + 1 {
        return Err(Error::state(format!(
            "attention record holds {} tokens but scoring needs all {num_patches} patches \
             plus the class token; run encode with full visibility first",
            record.num_tokens()
        )));
    }
    let heads = record.num_heads;
    let scale = match mode {
        ScoreMode::Raw => F::one(),
        _ => sc::<F>(1.0 / (record.head_dim() as f64).sqrt()),
    };
    let inv_heads = sc::<F>(1.0 / heads as f64);

    let mut agg = vec![F::zero(); num_patches];
    for h in 0..heads {
        let q_cls = record.q_head(0, h);
        let mut head_scores: Vec<F> = (0..num_patches)
            .map(|i| q_cls.dot(&record.k_head(i + 1, h)) * scale)
            .collect();
        if mode == ScoreMode::Softmax {
            head_scores = softmax(&head_scores);
        }
        for (a, s) in agg.iter_mut().zip(&head_scores) {
            *a += *s * inv_heads;
        }
    }
    AttentionScores::new(agg, record.block_index, mode)
}

/// Indices of the `k` largest scores; ties go to the smaller index. The
/// result is order-normalized ascending.
pub fn top_rank<F: Scalar>(scores: &[F], k: usize) -> Result<TopKIndexSet> {
    rank(scores, k, true)
}

/// Indices of the `k` smallest scores; ties go to the smaller index.
pub fn bottom_rank<F: Scalar>(scores: &[F], k: usize) -> Result<TopKIndexSet> {
    rank(scores, k, false)
}

fn rank<F: Scalar>(scores: &[F], k: usize, largest: bool) -> Result<TopKIndexSet> {
    let n = scores.len();
    if k > n {
        return Err(Error::validation(format!("cannot select {k} of {n} scores")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("non-finite score in ranking".to_string()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps equal scores in index order, giving the tie rule.
    if largest {
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite"));
    } else {
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));
    }
    order.truncate(k);
    TopKIndexSet::new(order, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Keep the K highest-attention patches (erase the low ones).
    MaskLow,
    /// Keep the K lowest-attention patches (erase the high ones).
    MaskHigh,
    /// Keep a uniform random K-subset.
    Random,
}

impl MaskStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::MaskLow => "mask_low",
            MaskStrategy::MaskHigh => "mask_high",
            MaskStrategy::Random => "random",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mask_low" => Ok(MaskStrategy::MaskLow),
            "mask_high" => Ok(MaskStrategy::MaskHigh),
            "random" => Ok(MaskStrategy::Random),
            other => Err(Error::validation(format!(
                "unknown mask strategy '{other}' (expected mask_low, mask_high, or random)"
            ))),
        }
    }
}

/// Which patches stay visible during the reconstruction pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub strategy: MaskStrategy,
    /// Number of patches kept visible.
    pub keep_count: usize,
    /// Drives the random strategy only; callers wanting per-sample variation
    /// reseed per call.
    pub rng_seed: u64,
}

impl MaskingPolicy {
    pub fn new(strategy: MaskStrategy, keep_count: usize, rng_seed: u64) -> Self {
        Self { strategy, keep_count, rng_seed }
    }

    pub fn validate(&self, num_patches: usize) -> Result<()> {
        if self.keep_count == 0 || self.keep_count > num_patches {
            return Err(Error::validation(format!(
                "keep count {} outside [1, {num_patches}]",
                self.keep_count
            )));
        }
        Ok(())
    }

    /// Same policy with a different seed (per-sample derivation).
    pub fn reseeded(self, rng_seed: u64) -> Self {
        Self { rng_seed, ..self }
    }
}

/// Applies a policy to scores, returning the kept (visible) indices.
pub fn select_visible<F: Scalar>(
    scores: &AttentionScores<F>,
    policy: &MaskingPolicy,
) -> Result<TopKIndexSet> {
    policy.validate(scores.len())?;
    match policy.strategy {
        MaskStrategy::MaskLow => top_rank(scores.values(), policy.keep_count),
        MaskStrategy::MaskHigh => bottom_rank(scores.values(), policy.keep_count),
        MaskStrategy::Random => {
            TopKIndexSet::random(scores.len(), policy.keep_count, policy.rng_seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    /// Builds a record where token 0 is the class token. `q_cls_heads` and
    /// `k_heads[i]` list per-head vectors of length head_dim.
    fn record(q_cls_heads: &[&[f64]], k_heads: &[Vec<Vec<f64>>]) -> AttentionRecord<f64> {
        let heads = q_cls_heads.len();
        let hd = q_cls_heads[0].len();
        let d = heads * hd;
        let t = k_heads.len() + 1;
        let mut q = Array2::zeros((t, d));
        let mut k = Array2::zeros((t, d));
        for (h, qh) in q_cls_heads.iter().enumerate() {
            for (j, v) in qh.iter().enumerate() {
                q[(0, h * hd + j)] = *v;
            }
        }
        for (i, per_head) in k_heads.iter().enumerate() {
            for (h, kh) in per_head.iter().enumerate() {
                for (j, v) in kh.iter().enumerate() {
                    k[(i + 1, h * hd + j)] = *v;
                }
            }
        }
        AttentionRecord { q, k, num_heads: heads, block_index: 3 }
    }

    #[test]
    fn orthogonal_query_gives_zero_scores() {
        let rec = record(
            &[&[1.0, 0.0]],
            &[vec![vec![0.0, 2.0]], vec![vec![0.0, -5.0]], vec![vec![0.0, 0.1]]],
        );
        let s = class_token_scores(&rec, 3, ScoreMode::Raw).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
        assert_eq!(s.source_block, 3);
    }

    #[test]
    fn single_head_raw_dot_products() {
        let rec = record(&[&[1.0, 1.0]], &[vec![vec![2.0, 3.0]], vec![vec![0.0, 0.0]]]);
        let s = class_token_scores(&rec, 2, ScoreMode::Raw).unwrap();
        assert_eq!(s.values(), &[5.0, 0.0]);
    }

    #[test]
    fn heads_aggregate_by_mean() {
        // head scores per patch: head0 -> [1, 2], head1 -> [3, 0]
        let rec = record(
            &[&[1.0, 0.0], &[1.0, 0.0]],
            &[
                vec![vec![1.0, 0.0], vec![3.0, 0.0]],
                vec![vec![2.0, 0.0], vec![0.0, 0.0]],
            ],
        );
        let s = class_token_scores(&rec, 2, ScoreMode::Raw).unwrap();
        assert_eq!(s.values(), &[2.0, 1.0]);
    }

    #[test]
    fn scaled_mode_divides_by_sqrt_head_dim() {
        let rec = record(&[&[2.0, 0.0, 0.0, 0.0]], &[vec![vec![3.0, 0.0, 0.0, 0.0]]]);
        let raw = class_token_scores(&rec, 1, ScoreMode::Raw).unwrap();
        let scaled = class_token_scores(&rec, 1, ScoreMode::Scaled).unwrap();
        assert_eq!(raw.values(), &[6.0]);
        assert!((scaled.values()[0] - 3.0).abs() < 1e-12); // 6 / sqrt(4)
    }

    #[test]
    fn partial_visibility_record_is_a_state_error() {
        let rec = record(&[&[1.0, 0.0]], &[vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]]);
        // record has 2 patches; ask for 4
        let err = class_token_scores(&rec, 4, ScoreMode::Raw).unwrap_err();
        assert!(matches!(err, Error::State(_)), "got {err:?}");
        assert!(err.to_string().contains("full visibility"));
    }

    #[test]
    fn top_rank_reference_cases() {
        let s = [0.1, 0.9, 0.5, 0.3];
        assert_eq!(top_rank(&s, 2).unwrap().indices(), &[1, 2]);
        assert_eq!(top_rank(&s, 0).unwrap().indices(), &[] as &[usize]);
        assert_eq!(top_rank(&s, 4).unwrap().indices(), &[0, 1, 2, 3]);
        assert!(top_rank(&s, 5).is_err());
        // ties break to the smaller index
        assert_eq!(top_rank(&[0.5, 0.5], 1).unwrap().indices(), &[0]);
        assert_eq!(bottom_rank(&[0.5, 0.5], 1).unwrap().indices(), &[0]);
    }

    #[test]
    fn strategies_on_reference_scores() {
        let scores = AttentionScores::new(vec![3.0, 1.0, 2.0, 0.0], 0, ScoreMode::Raw).unwrap();
        let low = select_visible(&scores, &MaskingPolicy::new(MaskStrategy::MaskLow, 2, 0)).unwrap();
        let high =
            select_visible(&scores, &MaskingPolicy::new(MaskStrategy::MaskHigh, 2, 0)).unwrap();
        assert_eq!(low.indices(), &[0, 2]);
        assert_eq!(high.indices(), &[1, 3]);
        // 2K = N with distinct scores: the two keeps partition the grid
        let mut union: Vec<usize> = low.indices().iter().chain(high.indices()).copied().collect();
        union.sort_unstable();
        assert_eq!(union, vec![0, 1, 2, 3]);
    }

    #[test]
    fn random_strategy_is_deterministic_per_seed() {
        let scores = AttentionScores::new(vec![0.0; 16], 0, ScoreMode::Raw).unwrap();
        let p = MaskingPolicy::new(MaskStrategy::Random, 5, 77);
        let a = select_visible(&scores, &p).unwrap();
        let b = select_visible(&scores, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let c = select_visible(&scores, &p.reseeded(78)).unwrap();
        assert!(a != c, "different seeds should give different subsets (16 choose 5)");
    }

    #[test]
    fn keep_count_bounds_are_enforced() {
        let scores = AttentionScores::new(vec![1.0, 2.0], 0, ScoreMode::Raw).unwrap();
        for k in [0usize, 3] {
            let p = MaskingPolicy::new(MaskStrategy::MaskLow, k, 0);
            assert!(select_visible(&scores, &p).is_err(), "k={k}");
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [MaskStrategy::MaskLow, MaskStrategy::MaskHigh, MaskStrategy::Random] {
            assert_eq!(MaskStrategy::parse(s.name()).unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert!(MaskStrategy::parse("mask_medium").is_err());
    }

    fn brute_force_top_k(scores: &[f64], k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
        });
        let mut keep: Vec<usize> = order.into_iter().take(k).collect();
        keep.sort_unstable();
        keep
    }

    proptest! {
        #[test]
        fn top_rank_matches_full_sort_oracle(
            raw in prop::collection::vec(-1000i32..1000, 1..64),
            k_frac in 0.0f64..1.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
            let k = (k_frac * scores.len() as f64) as usize;
            let got = top_rank(&scores, k).unwrap();
            let expected = brute_force_top_k(&scores, k);
            prop_assert_eq!(got.indices(), expected.as_slice());
        }

        #[test]
        fn monotone_transforms_preserve_selection(
            raw in prop::collection::vec(-100i32..100, 1..48),
            k_frac in 0.0f64..1.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
            let k = (k_frac * scores.len() as f64) as usize;
            let base = top_rank(&scores, k).unwrap();
            let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
            let expd: Vec<f64> = scores.iter().map(|s| (s / 200.0).exp()).collect();
            prop_assert_eq!(top_rank(&affine, k).unwrap(), base.clone());
            prop_assert_eq!(top_rank(&expd, k).unwrap(), base);
        }

        #[test]
        fn complementary_budgets_partition_distinct_scores(
            n_half in 1usize..24,
            shift in 0usize..48,
        ) {
            let n = 2 * n_half;
            // distinct scores: a rotation of 0..n
            let scores: Vec<f64> = (0..n).map(|i| ((i + shift) % n) as f64).collect();
            let low = top_rank(&scores, n_half).unwrap();
            let high = bottom_rank(&scores, n_half).unwrap();
            let mut union: Vec<usize> = low.indices().iter().chain(high.indices()).copied().collect();
            union.sort_unstable();
            prop_assert_eq!(union, (0..n).collect::<Vec<_>>());
        }
    }
}
