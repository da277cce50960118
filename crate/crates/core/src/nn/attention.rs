//! Multi-head self-attention with optional query/key capture.
//!
//! The capture path exists so the last encoder block can expose its per-head
//! class-token query and patch keys to the attention-based masking stage.

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;

use super::linear::{visit_linear, visit_linear_mut, Linear};
use super::params::{ParamMut, ParamRef, ParamSet};
use super::softmax::{softmax_rows, softmax_rows_backward};
use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

/// Per-head query/key activations captured from one block's attention.
#[derive(Debug, Clone)]
pub struct AttentionRecord<F> {
    /// Post-projection queries, `[T, D]`, heads along contiguous column spans.
    pub q: Array2<F>,
    /// Post-projection keys, `[T, D]`.
    pub k: Array2<F>,
    pub num_heads: usize,
    /// Index of the block that produced the record.
    pub block_index: usize,
}

impl<F: Scalar> AttentionRecord<F> {
    pub fn num_tokens(&self) -> usize {
        self.q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.ncols() / self.num_heads
    }

    /// Query row `token` restricted to head `h`.
    pub fn q_head(&self, token: usize, h: usize) -> ndarray::ArrayView1<'_, F> {
        let d = self.head_dim();
        self.q.slice(s![token, h * d..(h + 1) * d])
    }

    /// Key row `token` restricted to head `h`.
    pub fn k_head(&self, token: usize, h: usize) -> ndarray::ArrayView1<'_, F> {
        let d = self.head_dim();
        self.k.slice(s![token, h * d..(h + 1) * d])
    }
}

/// Scaled dot-product attention over `[T, D]` token embeddings.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<F> {
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
    num_heads: usize,
}

/// Forward byproducts for the backward pass.
pub struct AttnCache<F> {
    input: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
    pub record: Option<AttentionRecord<F>>,
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn init(embed_dim: usize, num_heads: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if embed_dim % num_heads != 0 {
            return Err(Error::Validation(format!(
                "embed dim {embed_dim} not divisible by {num_heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::init(embed_dim, embed_dim, std, rng),
            key: Linear::init(embed_dim, embed_dim, std, rng),
            value: Linear::init(embed_dim, embed_dim, std, rng),
            output: Linear::init(embed_dim, embed_dim, std, rng),
            num_heads,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn embed_dim(&self) -> usize {
        self.query.in_dim()
    }

    fn head_dim(&self) -> usize {
        self.embed_dim() / self.num_heads
    }

    /// `h: [T, D] -> [T, D]`. When `record_block` is set, the post-projection
    /// q/k tensors are copied into the cache's [`AttentionRecord`].
    pub fn forward(&self, h: &Array2<F>, record_block: Option<usize>) -> (Array2<F>, AttnCache<F>) {
        let t = h.nrows();
        let d = self.embed_dim();
        let hd = self.head_dim();
        let scale = sc::<F>(1.0 / (hd as f64).sqrt());

        let q = self.query.forward(h);
        let k = self.key.forward(h);
        let v = self.value.forward(h);

        let mut ctx = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(self.num_heads);
        for head in 0..self.num_heads {
            let cols = head * hd..(head + 1) * hd;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x * scale);
            let p = softmax_rows(&scores);
            let ch = p.dot(&vh);
            ctx.slice_mut(s![.., cols]).assign(&ch);
            probs.push(p);
        }
        let out = self.output.forward(&ctx);
        let record = record_block.map(|block_index| AttentionRecord {
            q: q.clone(),
            k: k.clone(),
            num_heads: self.num_heads,
            block_index,
        });
        (
            out,
            AttnCache { input: h.clone(), q, k, v, probs, ctx, record },
        )
    }

    /// Accumulates parameter gradients; returns `dh`.
    pub fn backward(&self, cache: &AttnCache<F>, dy: &Array2<F>, grad: &mut MultiHeadAttention<F>) -> Array2<F> {
        let t = dy.nrows();
        let d = self.embed_dim();
        let hd = self.head_dim();
        let scale = sc::<F>(1.0 / (hd as f64).sqrt());

        let dctx = self.output.backward(&cache.ctx, dy, &mut grad.output);

        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for head in 0..self.num_heads {
            let cols = head * hd..(head + 1) * hd;
            let p = &cache.probs[head];
            let qh = cache.q.slice(s![.., cols.clone()]);
            let kh = cache.k.slice(s![.., cols.clone()]);
            let vh = cache.v.slice(s![.., cols.clone()]);
            let dch = dctx.slice(s![.., cols.clone()]);

            let dprobs = dch.dot(&vh.t());
            let dvh = p.t().dot(&dch);
            let mut dscores = softmax_rows_backward(p, &dprobs);
            dscores.mapv_inplace(|x| x * scale);
            let dqh = dscores.dot(&kh);
            let dkh = dscores.t().dot(&qh);

            dq.slice_mut(s![.., cols.clone()]).assign(&dqh);
            dk.slice_mut(s![.., cols.clone()]).assign(&dkh);
            dv.slice_mut(s![.., cols]).assign(&dvh);
        }

        let mut dh = self.query.backward(&cache.input, &dq, &mut grad.query);
        dh += &self.key.backward(&cache.input, &dk, &mut grad.key);
        dh += &self.value.backward(&cache.input, &dv, &mut grad.value);
        dh
    }
}

pub(crate) fn visit_attn<F: Scalar>(
    a: &MultiHeadAttention<F>,
    prefix: &str,
    f: &mut dyn FnMut(&str, ParamRef<'_, F>),
) {
    visit_linear(&a.query, &format!("{prefix}.q"), f);
    visit_linear(&a.key, &format!("{prefix}.k"), f);
    visit_linear(&a.value, &format!("{prefix}.v"), f);
    visit_linear(&a.output, &format!("{prefix}.o"), f);
}

pub(crate) fn visit_attn_mut<F: Scalar>(
    a: &mut MultiHeadAttention<F>,
    prefix: &str,
    f: &mut dyn FnMut(&str, ParamMut<'_, F>),
) {
    visit_linear_mut(&mut a.query, &format!("{prefix}.q"), f);
    visit_linear_mut(&mut a.key, &format!("{prefix}.k"), f);
    visit_linear_mut(&mut a.value, &format!("{prefix}.v"), f);
    visit_linear_mut(&mut a.output, &format!("{prefix}.o"), f);
}

impl<F: Scalar> ParamSet<F> for MultiHeadAttention<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamRef<'_, F>)) {
        visit_attn(self, "attn", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_, F>)) {
        visit_attn_mut(self, "attn", f);
    }
}
