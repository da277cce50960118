//! Strided 2D convolution via im2col.
//!
//! Feature maps are `[batch, channels, height, width]`. The kernel is stored
//! flattened as `[out_channels, in_channels * k * k]` so that one matrix
//! product per batch covers every output position.

use mra_core::nn::params::{ParamMut, ParamRef, ParamSet};
use mra_core::nn::init;
use mra_core::scalar::Scalar;
use mra_core::{Error, Result};
use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    /// `[out_channels, in_channels * k * k]`; column index is `c * k * k + ky * k + kx`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    /// He-normal weights (fan-in `in_channels * k * k`), zero bias.
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: init::he_normal(out_channels, fan_in, fan_in, rng),
            bias: init::zeros1(out_channels),
            in_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Array2::zeros((out_channels, fan_in)),
            bias: Array1::zeros(out_channels),
            in_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    /// Output spatial side for an input of side `n`.
    fn out_side(&self, n: usize) -> Result<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.kernel {
            return Err(Error::geometry(format!(
                "kernel {} exceeds padded input side {padded}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    fn check_input(&self, x: &Array4<F>) -> Result<(usize, usize)> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::geometry(format!(
                "input has {c} channels, convolution expects {}",
                self.in_channels
            )));
        }
        Ok((self.out_side(h)?, self.out_side(w)?))
    }

    /// Gathers receptive fields of one image into `[out_h * out_w, c * k * k]`.
    /// Out-of-bounds taps read as zero.
    fn im2col(&self, x: &Array4<F>, b: usize, oh: usize, ow: usize, cols: &mut Array2<F>) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let (_, c_in, h, w) = x.dim();
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                for c in 0..c_in {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[(row, c * k * k + ky * k + kx)] =
                                x[(b, c, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds column gradients of one image back onto `dx`.
    fn col2im(&self, dcols: &Array2<F>, dx: &mut Array4<F>, b: usize, oh: usize, ow: usize) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let (_, c_in, h, w) = dx.dim();
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                for c in 0..c_in {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[(b, c, iy as usize, ix as usize)] +=
                                dcols[(row, c * k * k + ky * k + kx)];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let (oh, ow) = self.check_input(x)?;
        let (bsz, _, _, _) = x.dim();
        let c_out = self.out_channels();
        let mut y = Array4::zeros((bsz, c_out, oh, ow));
        let mut cols = Array2::zeros((oh * ow, self.weight.ncols()));
        for b in 0..bsz {
            cols.fill(F::zero());
            self.im2col(x, b, oh, ow, &mut cols);
            let flat = cols.dot(&self.weight.t());
            for ((row, c), v) in flat.indexed_iter() {
                y[(b, c, row / ow, row % ow)] = *v + self.bias[c];
            }
        }
        Ok(y)
    }

    /// Accumulates into `grad`, returns the input gradient. Rebuilds the
    /// im2col buffer instead of caching it; the gather is cheap next to the
    /// matrix products.
    pub fn backward(&self, x: &Array4<F>, dy: &Array4<F>, grad: &mut Self) -> Result<Array4<F>> {
        let (oh, ow) = self.check_input(x)?;
        let (bsz, _, _, _) = x.dim();
        let c_out = self.out_channels();
        let mut dx = Array4::zeros(x.dim());
        let mut cols = Array2::zeros((oh * ow, self.weight.ncols()));
        let mut dy_flat = Array2::zeros((oh * ow, c_out));
        for b in 0..bsz {
            cols.fill(F::zero());
            self.im2col(x, b, oh, ow, &mut cols);
            for ((c, oy, ox), v) in dy.index_axis(ndarray::Axis(0), b).indexed_iter() {
                dy_flat[(oy * ow + ox, c)] = *v;
            }
            grad.weight += &dy_flat.t().dot(&cols);
            for (c, col) in dy_flat.columns().into_iter().enumerate() {
                grad.bias[c] += col.sum();
            }
            let dcols = dy_flat.dot(&self.weight);
            self.col2im(&dcols, &mut dx, b, oh, ow);
        }
        Ok(dx)
    }
}

pub fn visit_conv<F: Scalar>(c: &Conv2d<F>, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_, F>)) {
    f(&format!("{prefix}.weight"), ParamRef::Matrix(&c.weight));
    f(&format!("{prefix}.bias"), ParamRef::Vector(&c.bias));
}

pub fn visit_conv_mut<F: Scalar>(
    c: &mut Conv2d<F>,
    prefix: &str,
    f: &mut dyn FnMut(&str, ParamMut<'_, F>),
) {
    f(&format!("{prefix}.weight"), ParamMut::Matrix(&mut c.weight));
    f(&format!("{prefix}.bias"), ParamMut::Vector(&mut c.bias));
}

impl<F: Scalar> ParamSet<F> for Conv2d<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamRef<'_, F>)) {
        visit_conv(self, "conv", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_, F>)) {
        visit_conv_mut(self, "conv", f);
    }
}
