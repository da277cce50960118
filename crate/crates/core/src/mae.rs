//! Masked autoencoder: encode visible patches only, decode the full grid.
//!
//! The encoder runs on kept patches plus a class token; the decoder fills the
//! masked slots with one shared learnable token and reconstructs every patch.
//! All forward paths cache what the hand-derived backward pass needs, and the
//! whole model is a [`ParamSet`] so the optimizer, gradient checker, and
//! checkpoint code see one flat named-tensor view.

use ndarray::{Array1, Array2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{patchify, unpatchify, Image, ImageBatch, PatchGeometry, TopKIndexSet};
use crate::nn::attention::AttentionRecord;
use crate::nn::block::{visit_block, visit_block_mut, BlockCache, TransformerBlock};
use crate::nn::init;
use crate::nn::linear::{visit_linear, visit_linear_mut, Linear};
use crate::nn::loss::{mse_loss, mse_loss_backward};
use crate::nn::norm::{visit_ln, visit_ln_mut, LayerNorm, LnCache};
use crate::nn::optim::Optimizer;
use crate::nn::params::{zero_params, ParamMut, ParamRef, ParamSet};
use crate::scalar::{sc, Scalar};

/// Rounds `ratio * n` half away from zero; the number of patches to mask.
pub fn masked_patch_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64 + 0.5).floor() as usize
}

/// Visible-patch budget for a masking fraction: `N - round(ratio * N)`.
pub fn keep_count(n: usize, ratio: f64) -> usize {
    n - masked_patch_count(n, ratio).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_embed_dim: usize,
    pub decoder_layers: usize,
    /// Shared by encoder and decoder blocks.
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Pretraining mask fraction.
    pub mask_ratio: f64,
    /// Restrict the reconstruction loss to masked patches (the default);
    /// `false` scores the whole image.
    pub loss_masked_only: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MaeConfig {
    /// Desk-scale preset: 4 encoder / 2 decoder layers on 32x32x3 inputs,
    /// 4x4 patches (64 tokens), 128/64 dims, 4 heads, 40% pretraining mask.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 128,
            encoder_layers: 4,
            decoder_embed_dim: 64,
            decoder_layers: 2,
            num_heads: 4,
            mlp_ratio: 4,
            mask_ratio: 0.40,
            loss_masked_only: true,
        }
    }

    /// Small enough for exhaustive finite-difference probing.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            embed_dim: 16,
            encoder_layers: 2,
            decoder_embed_dim: 8,
            decoder_layers: 1,
            num_heads: 2,
            mlp_ratio: 2,
            mask_ratio: 0.40,
            loss_masked_only: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_embed_dim", self.decoder_embed_dim),
            ("decoder_layers", self.decoder_layers),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be >= 1")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::validation(format!(
                "image side {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        for (name, dim) in [("embed_dim", self.embed_dim), ("decoder_embed_dim", self.decoder_embed_dim)] {
            if dim % self.num_heads != 0 {
                return Err(Error::validation(format!(
                    "{name} {dim} not divisible by {} heads",
                    self.num_heads
                )));
            }
            // Positions get a sin/cos pair per axis.
            if dim % 4 != 0 {
                return Err(Error::validation(format!("{name} {dim} must be a multiple of 4")));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::validation(format!(
                "mask ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry::new(self.image_size, self.image_size, self.patch_size)
            .expect("validated config")
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Flattened patch length `P*P*C`.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Fixed 2D sin-cos positions for a patch grid, `[N, dim]`, row-major over
/// the grid. First half encodes the row coordinate, second half the column.
fn sincos_positions<F: Scalar>(grid_h: usize, grid_w: usize, dim: usize) -> Array2<F> {
    assert!(dim % 4 == 0, "position dim must be a multiple of 4");
    let half = dim / 2;
    let quarter = half / 2;
    let mut out = Array2::zeros((grid_h * grid_w, dim));
    for r in 0..grid_h {
        for c in 0..grid_w {
            let i = r * grid_w + c;
            for j in 0..quarter {
                let omega = 1.0 / 10000f64.powf(j as f64 / quarter as f64);
                let (hr, hc) = (r as f64 * omega, c as f64 * omega);
                out[(i, j)] = sc(hr.sin());
                out[(i, quarter + j)] = sc(hr.cos());
                out[(i, half + j)] = sc(hc.sin());
                out[(i, half + quarter + j)] = sc(hc.cos());
            }
        }
    }
    out
}

/// Encoder, decoder, and embedding parameters. The positional tables are
/// deterministic functions of the config: they are stored for reuse but are
/// not visited, trained, hashed, or serialized.
#[derive(Debug, Clone)]
pub struct MaskedAutoencoderParams<F> {
    pub config: MaeConfig,
    pub patch_embed: Linear<F>,
    pub cls_token: Array1<F>,
    pub enc_blocks: Vec<TransformerBlock<F>>,
    pub enc_norm: LayerNorm<F>,
    pub decoder_embed: Linear<F>,
    pub mask_token: Array1<F>,
    pub dec_blocks: Vec<TransformerBlock<F>>,
    pub dec_norm: LayerNorm<F>,
    pub output_proj: Linear<F>,
    enc_pos: Array2<F>,
    dec_pos: Array2<F>,
}

const INIT_STD: f64 = 0.02;

impl<F: Scalar> MaskedAutoencoderParams<F> {
    pub fn init(config: MaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = config.image_size / config.patch_size;
        let d = config.embed_dim;
        let dd = config.decoder_embed_dim;

        let patch_embed = Linear::init(config.patch_len(), d, INIT_STD, &mut rng);
        let cls_token = init::trunc_normal(1, d, INIT_STD, &mut rng).row(0).to_owned();
        let mut enc_blocks = Vec::with_capacity(config.encoder_layers);
        for _ in 0..config.encoder_layers {
            enc_blocks.push(TransformerBlock::init(d, config.num_heads, config.mlp_ratio, INIT_STD, &mut rng)?);
        }
        let enc_norm = LayerNorm::init(d);
        let decoder_embed = Linear::init(d, dd, INIT_STD, &mut rng);
        let mask_token = init::trunc_normal(1, dd, INIT_STD, &mut rng).row(0).to_owned();
        let mut dec_blocks = Vec::with_capacity(config.decoder_layers);
        for _ in 0..config.decoder_layers {
            dec_blocks.push(TransformerBlock::init(dd, config.num_heads, config.mlp_ratio, INIT_STD, &mut rng)?);
        }
        let dec_norm = LayerNorm::init(dd);
        let output_proj = Linear::init(dd, config.patch_len(), INIT_STD, &mut rng);

        Ok(Self {
            config,
            patch_embed,
            cls_token,
            enc_blocks,
            enc_norm,
            decoder_embed,
            mask_token,
            dec_blocks,
            dec_norm,
            output_proj,
            enc_pos: sincos_positions(grid, grid, d),
            dec_pos: sincos_positions(grid, grid, dd),
        })
    }

    /// Same-shaped set with every trainable tensor zero, for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        zero_params(&mut g);
        g
    }

    fn check_image(&self, img: &Image<F>) -> Result<()> {
        if img.height() != self.config.image_size
            || img.width() != self.config.image_size
            || img.channels() != self.config.channels
        {
            return Err(Error::geometry(format!(
                "image {}x{}x{} does not match configured {}x{}x{}",
                img.height(),
                img.width(),
                img.channels(),
                self.config.image_size,
                self.config.image_size,
                self.config.channels
            )));
        }
        Ok(())
    }

    /// Embeds the kept patches plus the class token (row 0, zero position)
    /// and runs the encoder stack. Returns the normalized latents.
    fn run_encoder(
        &self,
        patches: &Array2<F>,
        keep: &TopKIndexSet,
        want_record: bool,
    ) -> Result<EncoderPass<F>> {
        if keep.is_empty() {
            return Err(Error::validation(
                "empty keep set: at least one visible patch is required",
            ));
        }
        let k = keep.len();
        let d = self.config.embed_dim;

        let mut selected = Array2::zeros((k, self.config.patch_len()));
        for (j, &idx) in keep.indices().iter().enumerate() {
            selected.row_mut(j).assign(&patches.row(idx));
        }

        let embedded = self.patch_embed.forward(&selected);
        let mut tokens = Array2::zeros((k + 1, d));
        tokens.row_mut(0).assign(&self.cls_token);
        for (j, &idx) in keep.indices().iter().enumerate() {
            let row = &embedded.row(j) + &self.enc_pos.row(idx);
            tokens.row_mut(j + 1).assign(&row);
        }

        let last = self.enc_blocks.len() - 1;
        let mut caches = Vec::with_capacity(self.enc_blocks.len());
        let mut x = tokens;
        for (i, block) in self.enc_blocks.iter().enumerate() {
            let record = (want_record && i == last).then_some(i);
            let (y, cache) = block.forward(&x, record);
            caches.push(cache);
            x = y;
        }
        let (latents, norm_cache) = self.enc_norm.forward(&x);
        let record = caches.last_mut().and_then(|c| c.take_record());
        Ok(EncoderPass { selected, caches, norm_cache, latents, record })
    }

    /// Encoder over the kept patches. The returned record carries the last
    /// block's per-head queries and keys for attention scoring.
    pub fn encode_visible(
        &self,
        img: &Image<F>,
        keep: &TopKIndexSet,
    ) -> Result<(Array2<F>, AttentionRecord<F>)> {
        self.check_image(img)?;
        let patches = patchify(img, &self.config.geometry())?;
        let pass = self.run_encoder(&patches, keep, true)?;
        let record = pass.record.expect("record requested");
        Ok((pass.latents, record))
    }

    /// Decoder: scatter embedded latents to their grid slots, fill masked
    /// slots with the mask token, and project every token back to pixels.
    /// Output is raw (unclamped) flattened patches, `[N, P*P*C]`.
    fn run_decoder(&self, latents: &Array2<F>, keep: &TopKIndexSet) -> Result<DecoderPass<F>> {
        let n = self.config.num_patches();
        let k = keep.len();
        if latents.nrows() != k + 1 || latents.ncols() != self.config.embed_dim {
            return Err(Error::validation(format!(
                "latents {}x{} do not match keep set of {k} (+1 class token) at dim {}",
                latents.nrows(),
                latents.ncols(),
                self.config.embed_dim
            )));
        }
        if let Some(&last) = keep.indices().last() {
            if last >= n {
                return Err(Error::validation(format!(
                    "keep index {last} out of range for {n} patches"
                )));
            }
        }

        let embedded = self.decoder_embed.forward(latents);
        let dd = self.config.decoder_embed_dim;
        let mut tokens = Array2::zeros((n, dd));
        for row in 0..n {
            tokens.row_mut(row).assign(&self.mask_token);
        }
        for (j, &idx) in keep.indices().iter().enumerate() {
            tokens.row_mut(idx).assign(&embedded.row(j + 1));
        }
        tokens += &self.dec_pos;

        let mut caches = Vec::with_capacity(self.dec_blocks.len());
        let mut x = tokens;
        for block in &self.dec_blocks {
            let (y, cache) = block.forward(&x, None);
            caches.push(cache);
            x = y;
        }
        let (normed, norm_cache) = self.dec_norm.forward(&x);
        let pred = self.output_proj.forward(&normed);
        Ok(DecoderPass { caches, norm_cache, normed, pred })
    }

    /// Raw reconstructed patches for a latent sequence (no clamping).
    pub fn decode_patches(&self, latents: &Array2<F>, keep: &TopKIndexSet) -> Result<Array2<F>> {
        Ok(self.run_decoder(latents, keep)?.pred)
    }

    /// Full reconstruction: decode, clamp to `[0, 1]`, reassemble the image.
    pub fn decode_full(&self, latents: &Array2<F>, keep: &TopKIndexSet) -> Result<Image<F>> {
        let mut pred = self.decode_patches(latents, keep)?;
        let (zero, one) = (F::zero(), F::one());
        pred.mapv_inplace(|v| v.min(one).max(zero));
        unpatchify(&pred, &self.config.geometry(), self.config.channels)
    }

    /// Encoder + decoder with every intermediate needed for the backward
    /// pass. `want_record` additionally captures last-block queries/keys.
    pub fn forward_masked(
        &self,
        img: &Image<F>,
        keep: &TopKIndexSet,
        want_record: bool,
    ) -> Result<MaeForwardCache<F>> {
        self.check_image(img)?;
        let patches = patchify(img, &self.config.geometry())?;
        let enc = self.run_encoder(&patches, keep, want_record)?;
        let dec = self.run_decoder(&enc.latents, keep)?;
        Ok(MaeForwardCache {
            keep: keep.clone(),
            patches,
            selected: enc.selected,
            enc_caches: enc.caches,
            enc_norm: enc.norm_cache,
            latents: enc.latents,
            record: enc.record,
            dec_caches: dec.caches,
            dec_norm: dec.norm_cache,
            dec_normed: dec.normed,
            pred: dec.pred,
        })
    }

    /// Per-element loss weights: 1 on reconstruction targets, 0 elsewhere.
    /// `None` means every element counts (whole-image mode).
    fn loss_weights(&self, keep: &TopKIndexSet) -> Option<Array2<F>> {
        if !self.config.loss_masked_only {
            return None;
        }
        let n = self.config.num_patches();
        let mut w = Array2::ones((n, self.config.patch_len()));
        for &idx in keep.indices() {
            w.row_mut(idx).fill(F::zero());
        }
        Some(w)
    }

    /// Reconstruction MSE for a completed forward pass, per config.
    pub fn reconstruction_loss(&self, cache: &MaeForwardCache<F>) -> Result<F> {
        let w = self.loss_weights(&cache.keep);
        mse_loss(&cache.pred, &cache.patches, w.as_ref())
    }

    /// Gradient of [`Self::reconstruction_loss`] with respect to the raw
    /// predicted patches.
    pub fn reconstruction_loss_backward(&self, cache: &MaeForwardCache<F>) -> Result<Array2<F>> {
        let w = self.loss_weights(&cache.keep);
        mse_loss_backward(&cache.pred, &cache.patches, w.as_ref())
    }

    /// Backpropagates `dpred` through decoder and encoder, accumulating into
    /// `grad` (a zeroed or partially accumulated clone of `self`).
    pub fn backward(&self, cache: &MaeForwardCache<F>, dpred: &Array2<F>, grad: &mut Self) {
        let n = self.config.num_patches();
        let k = cache.keep.len();

        // Decoder head.
        let dnormed = self.output_proj.backward(&cache.dec_normed, dpred, &mut grad.output_proj);
        let mut dx = self.dec_norm.backward(&cache.dec_norm, &dnormed, &mut grad.dec_norm);
        for i in (0..self.dec_blocks.len()).rev() {
            dx = self.dec_blocks[i].backward(&cache.dec_caches[i], &dx, &mut grad.dec_blocks[i]);
        }

        // Split token gradients: kept rows flow back to the embedded
        // latents; every masked row accumulates into the shared mask token.
        // Positions are constants.
        let mut dembedded = Array2::zeros((k + 1, self.config.decoder_embed_dim));
        let mut next_keep = 0usize;
        for row in 0..n {
            if next_keep < k && cache.keep.indices()[next_keep] == row {
                dembedded.row_mut(next_keep + 1).assign(&dx.row(row));
                next_keep += 1;
            } else {
                grad.mask_token += &dx.row(row);
            }
        }
        // Row 0 stays zero: the class-token latent is dropped before decoding.
        let dlatents = self
            .decoder_embed
            .backward(&cache.latents, &dembedded, &mut grad.decoder_embed);

        // Encoder stack.
        let mut dx = self.enc_norm.backward(&cache.enc_norm, &dlatents, &mut grad.enc_norm);
        for i in (0..self.enc_blocks.len()).rev() {
            dx = self.enc_blocks[i].backward(&cache.enc_caches[i], &dx, &mut grad.enc_blocks[i]);
        }

        grad.cls_token += &dx.row(0);
        let dtokens = dx.slice(ndarray::s![1.., ..]).to_owned();
        self.patch_embed.backward(&cache.selected, &dtokens, &mut grad.patch_embed);
    }
}

struct EncoderPass<F> {
    selected: Array2<F>,
    caches: Vec<BlockCache<F>>,
    norm_cache: LnCache<F>,
    latents: Array2<F>,
    record: Option<AttentionRecord<F>>,
}

struct DecoderPass<F> {
    caches: Vec<BlockCache<F>>,
    norm_cache: LnCache<F>,
    normed: Array2<F>,
    pred: Array2<F>,
}

/// Everything the backward pass needs from one masked forward pass.
pub struct MaeForwardCache<F> {
    pub keep: TopKIndexSet,
    /// Ground-truth flattened patches, `[N, P*P*C]`.
    pub patches: Array2<F>,
    selected: Array2<F>,
    enc_caches: Vec<BlockCache<F>>,
    enc_norm: LnCache<F>,
    pub latents: Array2<F>,
    pub record: Option<AttentionRecord<F>>,
    dec_caches: Vec<BlockCache<F>>,
    dec_norm: LnCache<F>,
    dec_normed: Array2<F>,
    /// Raw (unclamped) reconstruction, `[N, P*P*C]`.
    pub pred: Array2<F>,
}

/// Uniform random keep set for pretraining: masks `round(ratio * N)` patches.
pub fn sample_random_mask(geom: &PatchGeometry, ratio: f64, seed: u64) -> Result<TopKIndexSet> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::validation(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n = geom.num_patches();
    TopKIndexSet::random(n, keep_count(n, ratio), seed)
}

/// One optimizer step over a batch: fresh random mask per image, mean loss,
/// gradients averaged over the batch. Returns the batch loss.
pub fn pretrain_step<F: Scalar>(
    params: &mut MaskedAutoencoderParams<F>,
    opt: &mut Optimizer<F>,
    batch: &ImageBatch<F>,
    rng: &mut ChaCha8Rng,
) -> Result<F> {
    if batch.is_empty() {
        return Err(Error::validation("pretraining batch is empty"));
    }
    let geom = params.config.geometry();
    let ratio = params.config.mask_ratio;
    let inv_b = sc::<F>(1.0 / batch.len() as f64);

    let mut grad = params.zeros_like();
    let mut total = F::zero();
    for img in &batch.images {
        let keep = sample_random_mask(&geom, ratio, rng.next_u64())?;
        let cache = params.forward_masked(img, &keep, false)?;
        let loss = params.reconstruction_loss(&cache)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite reconstruction loss {loss}; aborting step"
            )));
        }
        total += loss * inv_b;
        let mut dpred = params.reconstruction_loss_backward(&cache)?;
        dpred.mapv_inplace(|g| g * inv_b);
        params.backward(&cache, &dpred, &mut grad);
    }
    opt.step(params, &grad)?;
    Ok(total)
}

impl<F: Scalar> ParamSet<F> for MaskedAutoencoderParams<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamRef<'_, F>)) {
        visit_linear(&self.patch_embed, "patch_embed", f);
        f("cls_token", ParamRef::Vector(&self.cls_token));
        for (i, b) in self.enc_blocks.iter().enumerate() {
            visit_block(b, &format!("enc.block{i}"), f);
        }
        visit_ln(&self.enc_norm, "enc.norm", f);
        visit_linear(&self.decoder_embed, "dec.embed", f);
        f("dec.mask_token", ParamRef::Vector(&self.mask_token));
        for (i, b) in self.dec_blocks.iter().enumerate() {
            visit_block(b, &format!("dec.block{i}"), f);
        }
        visit_ln(&self.dec_norm, "dec.norm", f);
        visit_linear(&self.output_proj, "out", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_, F>)) {
        visit_linear_mut(&mut self.patch_embed, "patch_embed", f);
        f("cls_token", ParamMut::Vector(&mut self.cls_token));
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            visit_block_mut(b, &format!("enc.block{i}"), f);
        }
        visit_ln_mut(&mut self.enc_norm, "enc.norm", f);
        visit_linear_mut(&mut self.decoder_embed, "dec.embed", f);
        f("dec.mask_token", ParamMut::Vector(&mut self.mask_token));
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            visit_block_mut(b, &format!("dec.block{i}"), f);
        }
        visit_ln_mut(&mut self.dec_norm, "dec.norm", f);
        visit_linear_mut(&mut self.output_proj, "out", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{flatten, param_count, param_hash};
    use ndarray::Array3;

    fn test_image(cfg: &MaeConfig, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = Array3::from_shape_fn(
            (cfg.image_size, cfg.image_size, cfg.channels),
            |_| (rng.next_u32() as f64) / (u32::MAX as f64),
        );
        Image::ingest(pixels).unwrap()
    }

    #[test]
    fn masked_count_rounds_half_away_from_zero() {
        assert_eq!(masked_patch_count(196, 0.75), 147);
        assert_eq!(keep_count(196, 0.75), 49);
        assert_eq!(masked_patch_count(64, 0.40), 26);
        assert_eq!(keep_count(64, 0.40), 38);
        assert_eq!(masked_patch_count(64, 0.0), 0);
        // exact .5 goes up
        assert_eq!(masked_patch_count(10, 0.25), 3);
    }

    #[test]
    fn random_mask_counts_and_determinism() {
        let geom = PatchGeometry::new(32, 32, 4).unwrap();
        let a = sample_random_mask(&geom, 0.40, 7).unwrap();
        let b = sample_random_mask(&geom, 0.40, 7).unwrap();
        assert_eq!(a.indices(), b.indices());
        assert_eq!(a.len(), 38);
        let full = sample_random_mask(&geom, 0.0, 7).unwrap();
        assert_eq!(full.len(), 64);
    }

    #[test]
    fn encode_full_visibility_has_n_plus_one_tokens() {
        let cfg = MaeConfig::tiny();
        let params = MaskedAutoencoderParams::<f64>::init(cfg, 1).unwrap();
        let img = test_image(&cfg, 2);
        let keep = TopKIndexSet::all(cfg.num_patches());
        let (latents, record) = params.encode_visible(&img, &keep).unwrap();
        assert_eq!(latents.nrows(), cfg.num_patches() + 1);
        assert_eq!(latents.ncols(), cfg.embed_dim);
        assert_eq!(record.num_tokens(), cfg.num_patches() + 1);
        assert_eq!(record.block_index, cfg.encoder_layers - 1);
    }

    #[test]
    fn empty_keep_set_is_rejected() {
        let cfg = MaeConfig::tiny();
        let params = MaskedAutoencoderParams::<f64>::init(cfg, 1).unwrap();
        let img = test_image(&cfg, 2);
        let keep = TopKIndexSet::new(vec![], cfg.num_patches()).unwrap();
        assert!(params.encode_visible(&img, &keep).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = MaeConfig::tiny();
        let params = MaskedAutoencoderParams::<f32>::init(cfg, 3).unwrap();
        let img = test_image(&cfg, 4).cast::<f32>();
        let keep = TopKIndexSet::new(vec![0, 2], cfg.num_patches()).unwrap();
        let (a, _) = params.encode_visible(&img, &keep).unwrap();
        let (b, _) = params.encode_visible(&img, &keep).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn decode_shape_is_full_image_for_any_keep() {
        let cfg = MaeConfig::tiny();
        let params = MaskedAutoencoderParams::<f64>::init(cfg, 5).unwrap();
        let img = test_image(&cfg, 6);
        for keep in [
            TopKIndexSet::new(vec![1], cfg.num_patches()).unwrap(),
            TopKIndexSet::new(vec![0, 3], cfg.num_patches()).unwrap(),
            TopKIndexSet::all(cfg.num_patches()),
        ] {
            let (latents, _) = params.encode_visible(&img, &keep).unwrap();
            let out = params.decode_full(&latents, &keep).unwrap();
            assert_eq!(
                (out.height(), out.width(), out.channels()),
                (cfg.image_size, cfg.image_size, cfg.channels)
            );
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn latent_keep_mismatch_is_rejected() {
        let cfg = MaeConfig::tiny();
        let params = MaskedAutoencoderParams::<f64>::init(cfg, 5).unwrap();
        let img = test_image(&cfg, 6);
        let keep2 = TopKIndexSet::new(vec![0, 3], cfg.num_patches()).unwrap();
        let keep3 = TopKIndexSet::new(vec![0, 1, 3], cfg.num_patches()).unwrap();
        let (latents, _) = params.encode_visible(&img, &keep2).unwrap();
        assert!(params.decode_full(&latents, &keep3).is_err());
    }

    /// All weights zero except the output-projection bias: the decoder is a
    /// constant function and every pixel equals the clamped bias.
    #[test]
    fn zero_weights_decode_to_clamped_output_bias() {
        let cfg = MaeConfig::tiny();
        let mut params = MaskedAutoencoderParams::<f64>::init(cfg, 7).unwrap();
        zero_params(&mut params);
        params.output_proj.bias.fill(0.25);
        let img = test_image(&cfg, 8);
        let keep = TopKIndexSet::new(vec![0], cfg.num_patches()).unwrap();
        let (latents, _) = params.encode_visible(&img, &keep).unwrap();
        let out = params.decode_full(&latents, &keep).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.25).abs() < 1e-12));

        params.output_proj.bias.fill(1.7);
        let (latents, _) = params.encode_visible(&img, &keep).unwrap();
        let out = params.decode_full(&latents, &keep).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 1.0), "clamped to 1");
    }

    /// Feeding the kept tokens in a different order (with their positional
    /// embeddings already attached) permutes the outputs the same way.
    #[test]
    fn encoder_is_permutation_equivariant_over_tokens() {
        let cfg = MaeConfig::tiny();
        let params = MaskedAutoencoderParams::<f64>::init(cfg, 9).unwrap();
        let t = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tokens = Array2::from_shape_fn((t, cfg.embed_dim), |_| {
            (rng.next_u32() as f64) / (u32::MAX as f64) - 0.5
        });
        let perm = [2usize, 0, 4, 1, 3];
        let mut permuted = Array2::zeros((t, cfg.embed_dim));
        for (to, &from) in perm.iter().enumerate() {
            permuted.row_mut(to).assign(&tokens.row(from));
        }

        let run = |x: &Array2<f64>| {
            let mut cur = x.clone();
            for b in &params.enc_blocks {
                cur = b.forward(&cur, None).0;
            }
            params.enc_norm.forward(&cur).0
        };
        let out = run(&tokens);
        let out_p = run(&permuted);
        for (to, &from) in perm.iter().enumerate() {
            for j in 0..cfg.embed_dim {
                assert!(
                    (out_p[(to, j)] - out[(from, j)]).abs() < 1e-10,
                    "row {from}->{to} col {j}"
                );
            }
        }
    }

    #[test]
    fn pretrain_step_reduces_loss_and_is_deterministic() {
        let cfg = MaeConfig::tiny();
        let run = |seed: u64| {
            let mut params = MaskedAutoencoderParams::<f64>::init(cfg, 11).unwrap();
            let mut opt = Optimizer::new(crate::nn::optim::OptimizerKind::adamw(), 1e-3, 0.0);
            let imgs: Vec<_> = (0..4).map(|i| test_image(&cfg, 100 + i)).collect();
            let batch = ImageBatch::new(imgs, vec![0; 4], (0..4).collect()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut losses = Vec::new();
            for _ in 0..30 {
                losses.push(pretrain_step(&mut params, &mut opt, &batch, &mut rng).unwrap());
            }
            losses
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.iter().all(|l| l.is_finite() && *l >= 0.0));
        let first = a[..5].iter().sum::<f64>() / 5.0;
        let last = a[25..].iter().sum::<f64>() / 5.0;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn backward_leaves_params_unchanged() {
        let cfg = MaeConfig::tiny();
        let params = MaskedAutoencoderParams::<f64>::init(cfg, 13).unwrap();
        let before = param_hash(&params);
        let img = test_image(&cfg, 14);
        let keep = sample_random_mask(&cfg.geometry(), cfg.mask_ratio, 15).unwrap();
        let cache = params.forward_masked(&img, &keep, false).unwrap();
        let mut grad = params.zeros_like();
        let dpred = params.reconstruction_loss_backward(&cache).unwrap();
        params.backward(&cache, &dpred, &mut grad);
        assert_eq!(param_hash(&params), before);
        assert!(flatten(&grad).iter().any(|g| *g != 0.0), "gradient all zero");
    }

    #[test]
    fn grad_struct_has_same_param_count() {
        let cfg = MaeConfig::tiny();
        let params = MaskedAutoencoderParams::<f32>::init(cfg, 16).unwrap();
        assert_eq!(param_count(&params), param_count(&params.zeros_like()));
    }

    #[test]
    fn desk_config_is_valid_and_sized_as_documented() {
        let cfg = MaeConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_patches(), 64);
        assert_eq!(cfg.patch_len(), 48);
        let params = MaskedAutoencoderParams::<f32>::init(cfg, 0).unwrap();
        let count = param_count(&params);
        assert!((500_000..2_000_000).contains(&count), "got {count}");
    }

    #[test]
    fn config_rejects_bad_fields() {
        let mut cfg = MaeConfig::desk();
        cfg.mask_ratio = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = MaeConfig::desk();
        cfg.patch_size = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = MaeConfig::desk();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_round_trip_rejects_unknown_keys() {
        let cfg = MaeConfig::desk();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: MaeConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert!(serde_json::from_str::<MaeConfig>("{\"bogus\": 1}").is_err());
        // omitted fields take defaults
        let partial: MaeConfig = serde_json::from_str("{\"mask_ratio\": 0.6}").unwrap();
        assert_eq!(partial.mask_ratio, 0.6);
        assert_eq!(partial.embed_dim, MaeConfig::desk().embed_dim);
    }
}
