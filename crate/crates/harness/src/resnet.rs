//! Small residual CNN for 3-channel square images.
//!
//! Layout: stem conv, three stages of one residual block each, stride-2
//! transitions between stages, global average pooling, linear head. Widths
//! [24, 48, 96] put the default at roughly 271K parameters.

use crate::batchnorm::{visit_bn, visit_bn_mut, BatchNorm2d, BnCache};
use crate::conv::{visit_conv, visit_conv_mut, Conv2d};
use mra_core::image::Image;
use mra_core::nn::params::{ParamMut, ParamRef, ParamSet};
use mra_core::nn::linear::{visit_linear, visit_linear_mut};
use mra_core::nn::Linear;
use mra_core::scalar::{sc, Scalar};
use mra_core::{Error, Result};
use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub channels: usize,
    pub widths: [usize; 3],
    pub num_classes: usize,
}

impl ClassifierConfig {
    /// Desk default: 32x32 RGB inputs, ~271K parameters at 10 classes.
    pub fn small(num_classes: usize) -> Self {
        ClassifierConfig { image_size: 32, channels: 3, widths: [24, 48, 96], num_classes }
    }

    /// Gradient-check size: every width even, 8x8 inputs.
    pub fn micro(num_classes: usize) -> Self {
        ClassifierConfig { image_size: 8, channels: 3, widths: [4, 6, 8], num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::validation(format!(
                "image size {} must be a positive multiple of 4 for the two stride-2 stages",
                self.image_size
            )));
        }
        if self.channels == 0 || self.num_classes < 2 {
            return Err(Error::validation("need at least 1 channel and 2 classes"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::validation("stage widths must be positive"));
        }
        Ok(())
    }
}

struct ResidualBlock<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
}

struct BlockCache<F> {
    x: Array4<F>,
    bn1: BnCache<F>,
    r: Array4<F>,
    bn2: BnCache<F>,
    y: Array4<F>,
}

impl<F: Scalar> ResidualBlock<F> {
    fn init(width: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::init(width, width, 3, 1, 1, rng),
            bn1: BatchNorm2d::init(width),
            conv2: Conv2d::init(width, width, 3, 1, 1, rng),
            bn2: BatchNorm2d::init(width),
        }
    }

    fn forward_train(&mut self, x: Array4<F>) -> Result<(Array4<F>, BlockCache<F>)> {
        let a = self.conv1.forward(&x)?;
        let (b, bn1) = self.bn1.forward_train(&a)?;
        let r = b.mapv(mra_core::nn::activation::relu);
        let c2 = self.conv2.forward(&r)?;
        let (d, bn2) = self.bn2.forward_train(&c2)?;
        let y = (&d + &x).mapv(mra_core::nn::activation::relu);
        Ok((y.clone(), BlockCache { x, bn1, r, bn2, y }))
    }

    fn forward_eval(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let b = self.bn1.forward_eval(&self.conv1.forward(x)?)?;
        let r = b.mapv(mra_core::nn::activation::relu);
        let d = self.bn2.forward_eval(&self.conv2.forward(&r)?)?;
        Ok((&d + x).mapv(mra_core::nn::activation::relu))
    }

    fn backward(&self, cache: &BlockCache<F>, dy: &Array4<F>, grad: &mut Self) -> Result<Array4<F>> {
        let mut dsum = dy.clone();
        ndarray::azip!((d in &mut dsum, y in &cache.y) if *y <= F::zero() { *d = F::zero() });
        let dc2 = self.bn2.backward(&cache.bn2, &dsum, &mut grad.bn2);
        let mut dr = self.conv2.backward(&cache.r, &dc2, &mut grad.conv2)?;
        ndarray::azip!((d in &mut dr, r in &cache.r) if *r <= F::zero() { *d = F::zero() });
        let da = self.bn1.backward(&cache.bn1, &dr, &mut grad.bn1);
        let mut dx = self.conv1.backward(&cache.x, &da, &mut grad.conv1)?;
        dx += &dsum;
        Ok(dx)
    }
}

struct Transition<F> {
    conv: Conv2d<F>,
    bn: BatchNorm2d<F>,
}

struct TransitionCache<F> {
    x: Array4<F>,
    bn: BnCache<F>,
    y: Array4<F>,
}

impl<F: Scalar> Transition<F> {
    fn init(from: usize, to: usize, rng: &mut ChaCha8Rng) -> Self {
        Transition { conv: Conv2d::init(from, to, 3, 2, 1, rng), bn: BatchNorm2d::init(to) }
    }

    fn forward_train(&mut self, x: Array4<F>) -> Result<(Array4<F>, TransitionCache<F>)> {
        let a = self.conv.forward(&x)?;
        let (b, bn) = self.bn.forward_train(&a)?;
        let y = b.mapv(mra_core::nn::activation::relu);
        Ok((y.clone(), TransitionCache { x, bn, y }))
    }

    fn forward_eval(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let b = self.bn.forward_eval(&self.conv.forward(x)?)?;
        Ok(b.mapv(mra_core::nn::activation::relu))
    }

    fn backward(
        &self,
        cache: &TransitionCache<F>,
        dy: &Array4<F>,
        grad: &mut Self,
    ) -> Result<Array4<F>> {
        let mut d = dy.clone();
        ndarray::azip!((d in &mut d, y in &cache.y) if *y <= F::zero() { *d = F::zero() });
        let da = self.bn.backward(&cache.bn, &d, &mut grad.bn);
        self.conv.backward(&cache.x, &da, &mut grad.conv)
    }
}

pub struct SmallResNet<F> {
    pub config: ClassifierConfig,
    stem_conv: Conv2d<F>,
    stem_bn: BatchNorm2d<F>,
    block1: ResidualBlock<F>,
    trans1: Transition<F>,
    block2: ResidualBlock<F>,
    trans2: Transition<F>,
    block3: ResidualBlock<F>,
    fc: Linear<F>,
}

pub struct NetCache<F> {
    x: Array4<F>,
    stem_bn: BnCache<F>,
    stem_out: Array4<F>,
    block1: BlockCache<F>,
    trans1: TransitionCache<F>,
    block2: BlockCache<F>,
    trans2: TransitionCache<F>,
    block3: BlockCache<F>,
    pooled: Array2<F>,
}

impl<F: Scalar> SmallResNet<F> {
    pub fn init(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w0, w1, w2] = config.widths;
        Ok(SmallResNet {
            stem_conv: Conv2d::init(config.channels, w0, 3, 1, 1, &mut rng),
            stem_bn: BatchNorm2d::init(w0),
            block1: ResidualBlock::init(w0, &mut rng),
            trans1: Transition::init(w0, w1, &mut rng),
            block2: ResidualBlock::init(w1, &mut rng),
            trans2: Transition::init(w1, w2, &mut rng),
            block3: ResidualBlock::init(w2, &mut rng),
            fc: Linear::init(w2, config.num_classes, 0.02, &mut rng),
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let [w0, w1, w2] = self.config.widths;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = SmallResNet {
            stem_conv: Conv2d::zeros(self.config.channels, w0, 3, 1, 1),
            stem_bn: BatchNorm2d::init(w0),
            block1: ResidualBlock::init(w0, &mut rng),
            trans1: Transition::init(w0, w1, &mut rng),
            block2: ResidualBlock::init(w1, &mut rng),
            trans2: Transition::init(w1, w2, &mut rng),
            block3: ResidualBlock::init(w2, &mut rng),
            fc: Linear::zeros(w2, self.config.num_classes),
            config: self.config.clone(),
        };
        mra_core::nn::params::zero_params(&mut net);
        net
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.config.channels || h != self.config.image_size || w != self.config.image_size {
            return Err(Error::geometry(format!(
                "input {c}x{h}x{w} does not match configured {}x{}x{}",
                self.config.channels, self.config.image_size, self.config.image_size
            )));
        }
        Ok(())
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Result<(Array2<F>, NetCache<F>)> {
        self.check_input(x)?;
        let a = self.stem_conv.forward(x)?;
        let (b, stem_bn) = self.stem_bn.forward_train(&a)?;
        let stem_out = b.mapv(mra_core::nn::activation::relu);
        let (h1, block1) = self.block1.forward_train(stem_out.clone())?;
        let (t1, trans1) = self.trans1.forward_train(h1)?;
        let (h2, block2) = self.block2.forward_train(t1)?;
        let (t2, trans2) = self.trans2.forward_train(h2)?;
        let (h3, block3) = self.block3.forward_train(t2)?;
        let pooled = global_average(&h3);
        let logits = self.fc.forward(&pooled);
        Ok((
            logits,
            NetCache {
                x: x.clone(),
                stem_bn,
                stem_out,
                block1,
                trans1,
                block2,
                trans2,
                block3,
                pooled,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.check_input(x)?;
        let b = self.stem_bn.forward_eval(&self.stem_conv.forward(x)?)?;
        let h = b.mapv(mra_core::nn::activation::relu);
        let h = self.block1.forward_eval(&h)?;
        let h = self.trans1.forward_eval(&h)?;
        let h = self.block2.forward_eval(&h)?;
        let h = self.trans2.forward_eval(&h)?;
        let h = self.block3.forward_eval(&h)?;
        Ok(self.fc.forward(&global_average(&h)))
    }

    /// Accumulates parameter gradients into `grad`; the input gradient is
    /// discarded at the stem.
    pub fn backward(&self, cache: &NetCache<F>, dlogits: &Array2<F>, grad: &mut Self) -> Result<()> {
        let dpooled = self.fc.backward(&cache.pooled, dlogits, &mut grad.fc);
        let dh3 = spread_average(&dpooled, cache.block3.y.dim());
        let dt2 = self.block3.backward(&cache.block3, &dh3, &mut grad.block3)?;
        let dh2 = self.trans2.backward(&cache.trans2, &dt2, &mut grad.trans2)?;
        let dt1 = self.block2.backward(&cache.block2, &dh2, &mut grad.block2)?;
        let dh1 = self.trans1.backward(&cache.trans1, &dt1, &mut grad.trans1)?;
        let mut dstem = self.block1.backward(&cache.block1, &dh1, &mut grad.block1)?;
        ndarray::azip!((d in &mut dstem, y in &cache.stem_out) if *y <= F::zero() { *d = F::zero() });
        let da = self.stem_bn.backward(&cache.stem_bn, &dstem, &mut grad.stem_bn);
        self.stem_conv.backward(&cache.x, &da, &mut grad.stem_conv)?;
        Ok(())
    }

    /// Running statistics, serialized alongside the visited parameters.
    pub fn export_buffers(&self) -> Vec<(String, Vec<F>)> {
        self.buffer_refs()
            .into_iter()
            .map(|(name, arr)| (name, arr.to_vec()))
            .collect()
    }

    pub fn import_buffers(&mut self, buffers: &[(String, Vec<F>)]) -> Result<()> {
        for (name, data) in buffers {
            let arr = self
                .buffer_refs_mut()
                .into_iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a)
                .ok_or_else(|| Error::state(format!("unknown buffer {name}")))?;
            if arr.len() != data.len() {
                return Err(Error::state(format!(
                    "buffer {name} holds {} values, checkpoint has {}",
                    arr.len(),
                    data.len()
                )));
            }
            for (dst, src) in arr.iter_mut().zip(data) {
                *dst = *src;
            }
        }
        Ok(())
    }

    fn buffer_refs(&self) -> Vec<(String, &Array1<F>)> {
        let bns = [
            ("stem.bn", &self.stem_bn),
            ("block1.bn1", &self.block1.bn1),
            ("block1.bn2", &self.block1.bn2),
            ("trans1.bn", &self.trans1.bn),
            ("block2.bn1", &self.block2.bn1),
            ("block2.bn2", &self.block2.bn2),
            ("trans2.bn", &self.trans2.bn),
            ("block3.bn1", &self.block3.bn1),
            ("block3.bn2", &self.block3.bn2),
        ];
        let mut out = Vec::new();
        for (name, bn) in bns {
            out.push((format!("{name}.running_mean"), &bn.running_mean));
            out.push((format!("{name}.running_var"), &bn.running_var));
        }
        out
    }

    fn buffer_refs_mut(&mut self) -> Vec<(String, &mut Array1<F>)> {
        let bns = [
            ("stem.bn", &mut self.stem_bn),
            ("block1.bn1", &mut self.block1.bn1),
            ("block1.bn2", &mut self.block1.bn2),
            ("trans1.bn", &mut self.trans1.bn),
            ("block2.bn1", &mut self.block2.bn1),
            ("block2.bn2", &mut self.block2.bn2),
            ("trans2.bn", &mut self.trans2.bn),
            ("block3.bn1", &mut self.block3.bn1),
            ("block3.bn2", &mut self.block3.bn2),
        ];
        let mut out = Vec::new();
        for (name, bn) in bns {
            let BatchNorm2d { running_mean, running_var, .. } = bn;
            out.push((format!("{name}.running_mean"), running_mean));
            out.push((format!("{name}.running_var"), running_var));
        }
        out
    }
}

/// `[b, c]` means over the spatial axes.
pub fn global_average<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (bsz, c_n, h, w) = x.dim();
    let inv = sc::<F>(1.0 / (h * w) as f64);
    let mut out = Array2::zeros((bsz, c_n));
    for ((b, c, _, _), v) in x.indexed_iter() {
        out[(b, c)] += *v * inv;
    }
    out
}

fn spread_average<F: Scalar>(dy: &Array2<F>, dim: (usize, usize, usize, usize)) -> Array4<F> {
    let inv = sc::<F>(1.0 / (dim.2 * dim.3) as f64);
    Array4::from_shape_fn(dim, |(b, c, _, _)| dy[(b, c)] * inv)
}

/// Stacks `[0,1]` images into the `[b, c, h, w]` input tensor, applying
/// per-channel normalization `(x - mean) / std`.
pub fn images_to_tensor<F: Scalar>(
    images: &[Image<F>],
    mean: &[F],
    std: &[F],
) -> Result<Array4<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::validation("cannot build a tensor from zero images"))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    if mean.len() != c || std.len() != c {
        return Err(Error::validation(format!(
            "normalization stats cover {} channels, images have {c}",
            mean.len()
        )));
    }
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (b, img) in images.iter().enumerate() {
        if img.height() != h || img.width() != w || img.channels() != c {
            return Err(Error::geometry("images in a batch must share dimensions"));
        }
        for ((r, col, ch), v) in img.pixels().indexed_iter() {
            out[(b, ch, r, col)] = (*v - mean[ch]) / std[ch];
        }
    }
    Ok(out)
}

impl<F: Scalar> ParamSet<F> for SmallResNet<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamRef<'_, F>)) {
        visit_conv(&self.stem_conv, "stem.conv", f);
        visit_bn(&self.stem_bn, "stem.bn", f);
        for (i, b) in [(1, &self.block1), (2, &self.block2), (3, &self.block3)] {
            visit_conv(&b.conv1, &format!("block{i}.conv1"), f);
            visit_bn(&b.bn1, &format!("block{i}.bn1"), f);
            visit_conv(&b.conv2, &format!("block{i}.conv2"), f);
            visit_bn(&b.bn2, &format!("block{i}.bn2"), f);
        }
        for (i, t) in [(1, &self.trans1), (2, &self.trans2)] {
            visit_conv(&t.conv, &format!("trans{i}.conv"), f);
            visit_bn(&t.bn, &format!("trans{i}.bn"), f);
        }
        visit_linear(&self.fc, "fc", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_, F>)) {
        visit_conv_mut(&mut self.stem_conv, "stem.conv", f);
        visit_bn_mut(&mut self.stem_bn, "stem.bn", f);
        for (i, b) in [(1, &mut self.block1), (2, &mut self.block2), (3, &mut self.block3)] {
            visit_conv_mut(&mut b.conv1, &format!("block{i}.conv1"), f);
            visit_bn_mut(&mut b.bn1, &format!("block{i}.bn1"), f);
            visit_conv_mut(&mut b.conv2, &format!("block{i}.conv2"), f);
            visit_bn_mut(&mut b.bn2, &format!("block{i}.bn2"), f);
        }
        for (i, t) in [(1, &mut self.trans1), (2, &mut self.trans2)] {
            visit_conv_mut(&mut t.conv, &format!("trans{i}.conv"), f);
            visit_bn_mut(&mut t.bn, &format!("trans{i}.bn"), f);
        }
        visit_linear_mut(&mut self.fc, "fc", f);
    }
}
