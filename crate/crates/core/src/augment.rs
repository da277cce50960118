//! The frozen reconstruction-as-augmentation pipeline.
//!
//! Two passes per image: a full-visibility encode to score every patch by
//! class-token attention, then a masked encode/decode that reconstructs the
//! image from the kept patches. The handle owns immutable autoencoder
//! parameters; nothing here ever writes to them.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attmask::{
    class_token_scores, select_visible, AttentionScores, MaskStrategy, MaskingPolicy, ScoreMode,
};
use crate::error::{Error, Result};
use crate::image::{apply_mask, mask_from_indices, Image, ImageBatch, TopKIndexSet};
use crate::mae::{keep_count, MaeConfig, MaskedAutoencoderParams};
use crate::nn::params::{check_finite, param_hash, param_hash_hex};
use crate::scalar::Scalar;

/// Stable per-sample seed: mixes a base seed with the sample id so the result
/// does not depend on batch position.
pub fn derive_seed(base: u64, id: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(base.wrapping_add(splitmix(id)))
}

/// Frozen autoencoder plus a masking policy, used as a pure image transform.
#[derive(Debug, Clone)]
pub struct AugmentorHandle<F> {
    params: MaskedAutoencoderParams<F>,
    policy: MaskingPolicy,
    apply_probability: f64,
    score_mode: ScoreMode,
    frozen_hash: [u8; 32],
}

/// Intermediate products of one pipeline run, for dumps and inspection.
pub struct AugmentStages<F> {
    pub scores: AttentionScores<F>,
    pub keep: TopKIndexSet,
    pub masked: Image<F>,
    pub reconstructed: Image<F>,
}

impl<F: Scalar> AugmentorHandle<F> {
    pub fn new(
        params: MaskedAutoencoderParams<F>,
        policy: MaskingPolicy,
        apply_probability: f64,
        score_mode: ScoreMode,
    ) -> Result<Self> {
        policy.validate(params.config.num_patches())?;
        if !(0.0..=1.0).contains(&apply_probability) {
            return Err(Error::validation(format!(
                "apply probability {apply_probability} outside [0, 1]"
            )));
        }
        check_finite(&params, "augmentor parameters")?;
        let frozen_hash = param_hash(&params);
        Ok(Self { params, policy, apply_probability, score_mode, frozen_hash })
    }

    /// Policy with the keep budget derived from a masking fraction:
    /// `K = N - round(ratio * N)`, the same rounding as pretraining masks.
    pub fn with_mask_ratio(
        params: MaskedAutoencoderParams<F>,
        strategy: MaskStrategy,
        mask_ratio: f64,
        apply_probability: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&mask_ratio) {
            return Err(Error::validation(format!(
                "augmentation mask ratio {mask_ratio} outside [0, 1)"
            )));
        }
        let n = params.config.num_patches();
        let policy = MaskingPolicy::new(strategy, keep_count(n, mask_ratio), 0);
        Self::new(params, policy, apply_probability, ScoreMode::default())
    }

    pub fn config(&self) -> &MaeConfig {
        &self.params.config
    }

    pub fn policy(&self) -> MaskingPolicy {
        self.policy
    }

    pub fn apply_probability(&self) -> f64 {
        self.apply_probability
    }

    /// Hash of the parameters at construction time.
    pub fn frozen_hash_hex(&self) -> String {
        self.frozen_hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of the parameters right now; equal to the frozen hash unless
    /// something unsound happened.
    pub fn current_hash_hex(&self) -> String {
        param_hash_hex(&self.params)
    }

    /// Errors if the parameters changed since construction.
    pub fn verify_frozen(&self) -> Result<()> {
        if param_hash(&self.params) != self.frozen_hash {
            return Err(Error::state(
                "augmentor parameters changed after freezing".to_string(),
            ));
        }
        Ok(())
    }

    /// Pass 1: full-visibility encode, score, select the visible set.
    /// `call_seed` feeds the random strategy only.
    fn score_and_select(
        &self,
        img: &Image<F>,
        call_seed: u64,
    ) -> Result<(AttentionScores<F>, TopKIndexSet)> {
        let n = self.params.config.num_patches();
        let all = TopKIndexSet::all(n);
        let (_, record) = self.params.encode_visible(img, &all)?;
        let scores = class_token_scores(&record, n, self.score_mode)?;
        let policy = match self.policy.strategy {
            MaskStrategy::Random => self.policy.reseeded(call_seed),
            _ => self.policy,
        };
        let keep = select_visible(&scores, &policy)?;
        Ok((scores, keep))
    }

    /// Pass 2: masked encode and full decode.
    fn reconstruct(&self, img: &Image<F>, keep: &TopKIndexSet) -> Result<Image<F>> {
        let (latents, _) = self.params.encode_visible(img, keep)?;
        self.params.decode_full(&latents, keep)
    }

    /// With probability `apply_probability`: score, mask, reconstruct, and
    /// return the clamped reconstruction; otherwise the image unchanged.
    pub fn augment(&self, img: &Image<F>, rng: &mut ChaCha8Rng) -> Result<Image<F>> {
        let (gate, call_seed) = (rng.gen::<f64>(), rng.next_u64());
        if gate >= self.apply_probability {
            return Ok(img.clone());
        }
        let (_, keep) = self.score_and_select(img, call_seed)?;
        self.reconstruct(img, &keep)
    }

    /// Scoring and masking only: returns the block-masked image without
    /// reconstruction (masked pixels zeroed). Same gate as [`Self::augment`].
    pub fn mask_only(&self, img: &Image<F>, rng: &mut ChaCha8Rng) -> Result<Image<F>> {
        let (gate, call_seed) = (rng.gen::<f64>(), rng.next_u64());
        if gate >= self.apply_probability {
            return Ok(img.clone());
        }
        let (_, keep) = self.score_and_select(img, call_seed)?;
        let mask = mask_from_indices(&keep, &self.params.config.geometry())?;
        apply_mask(img, &mask)
    }

    /// Full pipeline without the probability gate, exposing every stage.
    pub fn stages(&self, img: &Image<F>, call_seed: u64) -> Result<AugmentStages<F>> {
        let (scores, keep) = self.score_and_select(img, call_seed)?;
        let mask = mask_from_indices(&keep, &self.params.config.geometry())?;
        let masked = apply_mask(img, &mask)?;
        let reconstructed = self.reconstruct(img, &keep)?;
        Ok(AugmentStages { scores, keep, masked, reconstructed })
    }

    /// Elementwise [`Self::augment`] with per-sample seeds derived from the
    /// sample ids, so the result is invariant to batch order.
    pub fn augment_batch(&self, batch: &ImageBatch<F>, rng: &mut ChaCha8Rng) -> Result<ImageBatch<F>> {
        let base = rng.next_u64();
        let mut images = Vec::with_capacity(batch.len());
        for (img, &id) in batch.images.iter().zip(&batch.ids) {
            let mut sub = ChaCha8Rng::seed_from_u64(derive_seed(base, id));
            images.push(self.augment(img, &mut sub)?);
        }
        ImageBatch::new(images, batch.labels.clone(), batch.ids.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::RngCore;

    fn handle(strategy: MaskStrategy, keep: usize, prob: f64) -> AugmentorHandle<f64> {
        let cfg = MaeConfig::tiny();
        let params = MaskedAutoencoderParams::init(cfg, 21).unwrap();
        AugmentorHandle::new(
            params,
            MaskingPolicy::new(strategy, keep, 5),
            prob,
            ScoreMode::Raw,
        )
        .unwrap()
    }

    /// Pixels strictly inside (0, 1]: masking to zero is detectable.
    fn positive_image(cfg: &MaeConfig, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = Array3::from_shape_fn(
            (cfg.image_size, cfg.image_size, cfg.channels),
            |_| (rng.next_u32() as f64 + 1.0) / (u32::MAX as f64 + 1.0),
        );
        Image::ingest(pixels).unwrap()
    }

    #[test]
    fn augment_preserves_shape_and_range() {
        let h = handle(MaskStrategy::MaskLow, 2, 1.0);
        let img = positive_image(h.config(), 30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = h.augment(&img, &mut rng).unwrap();
        assert_eq!(
            (out.height(), out.width(), out.channels()),
            (img.height(), img.width(), img.channels())
        );
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_probability_is_the_identity() {
        let h = handle(MaskStrategy::MaskLow, 2, 0.0);
        let img = positive_image(h.config(), 31);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = h.augment(&img, &mut rng).unwrap();
        assert_eq!(out, img);
        let out = h.mask_only(&img, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn fixed_rng_state_gives_bit_identical_output() {
        let h = handle(MaskStrategy::Random, 2, 1.0);
        let img = positive_image(h.config(), 32);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            h.augment(&img, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a
            .pixels()
            .iter()
            .zip(b.pixels().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn parameters_stay_frozen_across_calls() {
        let h = handle(MaskStrategy::MaskLow, 2, 1.0);
        let img = positive_image(h.config(), 33);
        let before = h.current_hash_hex();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            h.augment(&img, &mut rng).unwrap();
            h.mask_only(&img, &mut rng).unwrap();
        }
        assert_eq!(h.current_hash_hex(), before);
        assert_eq!(h.frozen_hash_hex(), before);
        h.verify_frozen().unwrap();
    }

    #[test]
    fn low_and_high_strategies_differ() {
        let img = positive_image(&MaeConfig::tiny(), 34);
        let low = handle(MaskStrategy::MaskLow, 2, 1.0);
        let high = handle(MaskStrategy::MaskHigh, 2, 1.0);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = low.augment(&img, &mut r1).unwrap();
        let b = high.augment(&img, &mut r2).unwrap();
        assert!(a != b, "mask_low and mask_high should reconstruct differently");
    }

    #[test]
    fn mask_only_zeroes_exactly_the_masked_patches() {
        let h = handle(MaskStrategy::MaskLow, 1, 1.0);
        let cfg = *h.config();
        let img = positive_image(&cfg, 35);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = h.mask_only(&img, &mut rng).unwrap();
        let zeros = out.pixels().iter().filter(|&&v| v == 0.0).count();
        let n = cfg.num_patches();
        let expected = (n - 1) * cfg.patch_size * cfg.patch_size * cfg.channels;
        assert_eq!(zeros, expected);
    }

    #[test]
    fn mask_only_with_full_keep_is_identity() {
        let cfg = MaeConfig::tiny();
        let h = handle(MaskStrategy::MaskLow, cfg.num_patches(), 1.0);
        let img = positive_image(&cfg, 36);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(h.mask_only(&img, &mut rng).unwrap(), img);
    }

    /// mask_only must agree with composing its constituent operations.
    #[test]
    fn mask_only_composes_from_parts() {
        let h = handle(MaskStrategy::MaskLow, 2, 1.0);
        let img = positive_image(h.config(), 37);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let via_handle = h.mask_only(&img, &mut rng).unwrap();

        let stages = h.stages(&img, 0).unwrap();
        let mask = mask_from_indices(&stages.keep, &h.config().geometry()).unwrap();
        let composed = apply_mask(&img, &mask).unwrap();
        assert_eq!(via_handle, composed);
        assert_eq!(stages.masked, composed);
    }

    #[test]
    fn batch_of_one_matches_derived_single_call() {
        let h = handle(MaskStrategy::Random, 2, 1.0);
        let img = positive_image(h.config(), 38);
        let batch = ImageBatch::new(vec![img.clone()], vec![3], vec![17]).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = h.augment_batch(&batch, &mut rng).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = rng.next_u64();
        let mut sub = ChaCha8Rng::seed_from_u64(derive_seed(base, 17));
        let single = h.augment(&img, &mut sub).unwrap();
        assert_eq!(out.images[0], single);
        assert_eq!(out.labels, vec![3]);
        assert_eq!(out.ids, vec![17]);
    }

    #[test]
    fn empty_batch_stays_empty() {
        let h = handle(MaskStrategy::MaskLow, 2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let out = h.augment_batch(&ImageBatch::empty(), &mut rng).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn batch_augmentation_commutes_with_permutation() {
        let h = handle(MaskStrategy::Random, 2, 1.0);
        let cfg = *h.config();
        let imgs: Vec<_> = (0..4).map(|i| positive_image(&cfg, 40 + i)).collect();
        let batch = ImageBatch::new(imgs, vec![0, 1, 2, 3], vec![100, 101, 102, 103]).unwrap();
        let perm = [2usize, 0, 3, 1];

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let aug_then_perm = h.augment_batch(&batch, &mut rng).unwrap().select(&perm);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let perm_then_aug = h.augment_batch(&batch.select(&perm), &mut rng).unwrap();

        for (a, b) in aug_then_perm.images.iter().zip(&perm_then_aug.images) {
            assert!(a
                .pixels()
                .iter()
                .zip(b.pixels().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(aug_then_perm.labels, perm_then_aug.labels);
        assert_eq!(aug_then_perm.ids, perm_then_aug.ids);
    }

    #[test]
    fn geometry_mismatch_is_an_error() {
        let h = handle(MaskStrategy::MaskLow, 2, 1.0);
        let wrong = Image::<f64>::zeros(16, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert!(h.augment(&wrong, &mut rng).is_err());
    }

    #[test]
    fn invalid_construction_is_rejected() {
        let cfg = MaeConfig::tiny();
        let params = MaskedAutoencoderParams::<f64>::init(cfg, 50).unwrap();
        let n = cfg.num_patches();
        assert!(AugmentorHandle::new(
            params.clone(),
            MaskingPolicy::new(MaskStrategy::MaskLow, n + 1, 0),
            1.0,
            ScoreMode::Raw
        )
        .is_err());
        assert!(AugmentorHandle::new(
            params.clone(),
            MaskingPolicy::new(MaskStrategy::MaskLow, 2, 0),
            1.5,
            ScoreMode::Raw
        )
        .is_err());
        // ratio-derived constructor: 0.4 of 4 patches -> keep 2
        let h = AugmentorHandle::with_mask_ratio(params, MaskStrategy::MaskLow, 0.4, 1.0).unwrap();
        assert_eq!(h.policy().keep_count, 2);
    }
}
