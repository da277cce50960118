//! Pre-norm transformer block: attention and MLP sublayers on residual paths.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::activation::{gelu_rows, gelu_rows_backward};
use super::attention::{visit_attn, visit_attn_mut, AttnCache, MultiHeadAttention};
use super::linear::{visit_linear, visit_linear_mut, Linear};
use super::norm::{visit_ln, visit_ln_mut, LayerNorm, LnCache};
use super::params::{ParamMut, ParamRef, ParamSet};
use crate::error::Result;
use crate::scalar::Scalar;

/// `x + Attn(LN1(x))`, then `+ MLP(LN2(·))` with a GELU hidden layer.
#[derive(Debug, Clone)]
pub struct TransformerBlock<F> {
    pub ln1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

/// Forward byproducts for the backward pass. Sublayer inputs live inside the
/// sublayer caches; the residual adds need nothing stored.
pub struct BlockCache<F> {
    ln1: LnCache<F>,
    attn: AttnCache<F>,
    ln2: LnCache<F>,
    h2: Array2<F>,
    a1: Array2<F>,
    g1: Array2<F>,
}

impl<F: Scalar> BlockCache<F> {
    /// Hands the captured attention record to the caller, if one was requested.
    pub fn take_record(&mut self) -> Option<super::attention::AttentionRecord<F>> {
        self.attn.record.take()
    }
}

impl<F: Scalar> TransformerBlock<F> {
    pub fn init(
        embed_dim: usize,
        num_heads: usize,
        mlp_ratio: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hidden = embed_dim * mlp_ratio;
        Ok(Self {
            ln1: LayerNorm::init(embed_dim),
            attn: MultiHeadAttention::init(embed_dim, num_heads, std, rng)?,
            ln2: LayerNorm::init(embed_dim),
            fc1: Linear::init(embed_dim, hidden, std, rng),
            fc2: Linear::init(hidden, embed_dim, std, rng),
        })
    }

    /// `x: [T, D] -> [T, D]`.
    pub fn forward(&self, x: &Array2<F>, record_block: Option<usize>) -> (Array2<F>, BlockCache<F>) {
        let (h1, ln1) = self.ln1.forward(x);
        let (attn_out, attn) = self.attn.forward(&h1, record_block);
        let y = x + &attn_out;

        let (h2, ln2) = self.ln2.forward(&y);
        let a1 = self.fc1.forward(&h2);
        let g1 = gelu_rows(&a1);
        let mlp_out = self.fc2.forward(&g1);
        let z = &y + &mlp_out;

        (z, BlockCache { ln1, attn, ln2, h2, a1, g1 })
    }

    /// Accumulates parameter gradients; returns `dx`.
    pub fn backward(&self, cache: &BlockCache<F>, dz: &Array2<F>, grad: &mut TransformerBlock<F>) -> Array2<F> {
        // MLP residual: dz flows both into the skip and through fc2/gelu/fc1.
        let dg1 = self.fc2.backward(&cache.g1, dz, &mut grad.fc2);
        let da1 = gelu_rows_backward(&cache.a1, &dg1);
        let dh2 = self.fc1.backward(&cache.h2, &da1, &mut grad.fc1);
        let mut dy = self.ln2.backward(&cache.ln2, &dh2, &mut grad.ln2);
        dy += dz;

        // Attention residual.
        let dh1 = self.attn.backward(&cache.attn, &dy, &mut grad.attn);
        let mut dx = self.ln1.backward(&cache.ln1, &dh1, &mut grad.ln1);
        dx += &dy;
        dx
    }
}

pub(crate) fn visit_block<F: Scalar>(
    b: &TransformerBlock<F>,
    prefix: &str,
    f: &mut dyn FnMut(&str, ParamRef<'_, F>),
) {
    visit_ln(&b.ln1, &format!("{prefix}.ln1"), f);
    visit_attn(&b.attn, &format!("{prefix}.attn"), f);
    visit_ln(&b.ln2, &format!("{prefix}.ln2"), f);
    visit_linear(&b.fc1, &format!("{prefix}.fc1"), f);
    visit_linear(&b.fc2, &format!("{prefix}.fc2"), f);
}

pub(crate) fn visit_block_mut<F: Scalar>(
    b: &mut TransformerBlock<F>,
    prefix: &str,
    f: &mut dyn FnMut(&str, ParamMut<'_, F>),
) {
    visit_ln_mut(&mut b.ln1, &format!("{prefix}.ln1"), f);
    visit_attn_mut(&mut b.attn, &format!("{prefix}.attn"), f);
    visit_ln_mut(&mut b.ln2, &format!("{prefix}.ln2"), f);
    visit_linear_mut(&mut b.fc1, &format!("{prefix}.fc1"), f);
    visit_linear_mut(&mut b.fc2, &format!("{prefix}.fc2"), f);
}

impl<F: Scalar> ParamSet<F> for TransformerBlock<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamRef<'_, F>)) {
        visit_block(self, "block", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_, F>)) {
        visit_block_mut(self, "block", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;

    /// With zeroed attention-output and fc2 projections, both residual
    /// branches contribute nothing and the block is the identity map.
    #[test]
    fn zeroed_projections_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut block = TransformerBlock::<f64>::init(8, 2, 4, 0.02, &mut rng).unwrap();
        block.attn.output = Linear::zeros(8, 8);
        block.fc2 = Linear::zeros(32, 8);

        let x = Array2::from_shape_fn((5, 8), |(i, j)| 0.1 * (i as f64) - 0.03 * (j as f64));
        let (z, _) = block.forward(&x, None);
        let max_diff = (&z - &x).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(max_diff < 1e-12, "identity violated by {max_diff}");
    }

    #[test]
    fn record_captured_only_on_request() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = TransformerBlock::<f32>::init(8, 2, 4, 0.02, &mut rng).unwrap();
        let x = Array2::from_elem((3, 8), 0.25f32);
        let (_, mut cache) = block.forward(&x, None);
        assert!(cache.take_record().is_none());
        let (_, mut cache) = block.forward(&x, Some(3));
        let rec = cache.take_record().expect("record requested");
        assert_eq!(rec.block_index, 3);
        assert_eq!(rec.num_heads, 2);
        assert_eq!(rec.num_tokens(), 3);
        assert_eq!(rec.head_dim(), 4);
    }
}
