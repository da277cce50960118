//! Model-free augmentation baselines: Cutout, Mixup, CutMix.
//!
//! All three preserve image shape and the `[0, 1]` range. Mixing operations
//! return a [`MixedLabel`] whose loss contract is
//! `lam * CE(first) + (1 - lam) * CE(second)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::image::Image;
pub use crate::nn::loss::MixedLabel;
use crate::scalar::{sc, Scalar};

/// Mixup Beta parameter default (originating paper).
pub const MIXUP_ALPHA: f64 = 0.2;
/// CutMix Beta parameter default (originating paper).
pub const CUTMIX_ALPHA: f64 = 1.0;

fn check_same_shape<F: Scalar>(a: &Image<F>, b: &Image<F>) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::validation(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

fn sample_beta(alpha: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::validation(format!("bad Beta parameter {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// A square region of side `hole_size`, centered uniformly at random and
/// clipped at the borders, set to zero in every channel.
pub fn cutout<F: Scalar>(img: &Image<F>, hole_size: usize, rng: &mut ChaCha8Rng) -> Result<Image<F>> {
    let (h, w) = (img.height(), img.width());
    if hole_size > h.min(w) {
        return Err(Error::validation(format!(
            "hole size {hole_size} exceeds image side {}",
            h.min(w)
        )));
    }
    if hole_size == 0 {
        // still consume the center draw so rng usage is size-independent
        let _ = (rng.gen_range(0..h), rng.gen_range(0..w));
        return Ok(img.clone());
    }
    let cy = rng.gen_range(0..h);
    let cx = rng.gen_range(0..w);
    Ok(cutout_at(img, hole_size, cy, cx))
}

/// [`cutout`] with a fixed center, for exact-area verification.
pub fn cutout_at<F: Scalar>(img: &Image<F>, hole_size: usize, cy: usize, cx: usize) -> Image<F> {
    let (h, w) = (img.height(), img.width());
    let (r0, r1) = clipped_span(cy, hole_size, h);
    let (c0, c1) = clipped_span(cx, hole_size, w);
    let mut pixels = img.pixels().clone();
    for ((r, c, _), v) in pixels.indexed_iter_mut() {
        if r >= r0 && r < r1 && c >= c0 && c < c1 {
            *v = F::zero();
        }
    }
    Image::from_pixels(pixels)
}

/// Half-open span of length `side` centered at `center`, clipped to `[0, limit)`.
fn clipped_span(center: usize, side: usize, limit: usize) -> (usize, usize) {
    let lo = center as isize - (side / 2) as isize;
    let hi = lo + side as isize;
    (lo.max(0) as usize, (hi.max(0) as usize).min(limit))
}

/// Convex blend of two images with `lam ~ Beta(alpha, alpha)`.
pub fn mixup<F: Scalar>(
    a: &Image<F>,
    label_a: usize,
    b: &Image<F>,
    label_b: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Image<F>, MixedLabel<F>)> {
    let lam = sample_beta(alpha, rng)?;
    let img = mixup_with_lambda(a, b, lam)?;
    Ok((img, MixedLabel::mixed(label_a, label_b, sc(lam))))
}

/// `lam * a + (1 - lam) * b` with the weight given explicitly.
pub fn mixup_with_lambda<F: Scalar>(a: &Image<F>, b: &Image<F>, lam: f64) -> Result<Image<F>> {
    check_same_shape(a, b)?;
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::validation(format!("mix weight {lam} outside [0, 1]")));
    }
    let (la, lb) = (sc::<F>(lam), sc::<F>(1.0 - lam));
    let pixels = a.pixels() * la + b.pixels() * lb;
    Ok(Image::from_pixels(pixels))
}

/// Pastes a random box from `b` into `a`. The box has side fraction
/// `sqrt(1 - lam)` per axis with `lam ~ Beta(alpha, alpha)`, its center is
/// uniform, and it is clipped at the borders; the returned weight is
/// recomputed from the exact pasted area.
pub fn cutmix<F: Scalar>(
    a: &Image<F>,
    label_a: usize,
    b: &Image<F>,
    label_b: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Image<F>, MixedLabel<F>)> {
    check_same_shape(a, b)?;
    let lam = sample_beta(alpha, rng)?;
    let cy = rng.gen_range(0..a.height());
    let cx = rng.gen_range(0..a.width());
    let (img, lam_adjusted) = cutmix_with_box(a, b, lam, cy, cx)?;
    Ok((img, MixedLabel::mixed(label_a, label_b, sc(lam_adjusted))))
}

/// [`cutmix`] with the draw results given explicitly. Returns the blended
/// image and the exact post-clipping weight of image `a`.
pub fn cutmix_with_box<F: Scalar>(
    a: &Image<F>,
    b: &Image<F>,
    lam: f64,
    cy: usize,
    cx: usize,
) -> Result<(Image<F>, f64)> {
    check_same_shape(a, b)?;
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::validation(format!("mix weight {lam} outside [0, 1]")));
    }
    let (h, w) = (a.height(), a.width());
    let cut = (1.0 - lam).sqrt();
    let side_h = (h as f64 * cut) as usize;
    let side_w = (w as f64 * cut) as usize;
    let (r0, r1) = clipped_span(cy, side_h, h);
    let (c0, c1) = clipped_span(cx, side_w, w);

    let mut pixels = a.pixels().clone();
    for ((r, c, ch), v) in pixels.indexed_iter_mut() {
        if r >= r0 && r < r1 && c >= c0 && c < c1 {
            *v = b.pixels()[(r, c, ch)];
        }
    }
    let pasted = (r1 - r0) * (c1 - c0);
    let lam_adjusted = 1.0 - pasted as f64 / (h * w) as f64;
    Ok((Image::from_pixels(pixels), lam_adjusted))
}

/// Deterministic per-seed wrapper used by data pipelines.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::RngCore;

    fn rand_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = Array3::from_shape_fn((h, w, c), |_| {
            (rng.next_u32() as f64 + 1.0) / (u32::MAX as f64 + 1.0)
        });
        Image::ingest(pixels).unwrap()
    }

    #[test]
    fn cutout_zero_hole_is_identity() {
        let img = rand_image(8, 8, 3, 1);
        let mut rng = seeded_rng(2);
        assert_eq!(cutout(&img, 0, &mut rng).unwrap(), img);
    }

    #[test]
    fn cutout_full_hole_centered_blanks_everything() {
        let img = rand_image(8, 8, 3, 3);
        let out = cutout_at(&img, 8, 4, 4);
        assert!(out.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cutout_interior_hole_zeroes_exact_area() {
        let img = rand_image(16, 16, 3, 4);
        let out = cutout_at(&img, 4, 8, 8);
        let zeros = out.pixels().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 4 * 4 * 3);
    }

    #[test]
    fn cutout_clips_at_borders() {
        let img = rand_image(16, 16, 1, 5);
        // center in the corner: only the in-bounds quadrant is zeroed
        let out = cutout_at(&img, 8, 0, 0);
        let zeros = out.pixels().iter().filter(|&&v| v == 0.0).count();
        // rows [-4, 4) clip to [0, 4), same for cols
        assert_eq!(zeros, 4 * 4);
        assert!(cutout(&img, 17, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn mixup_extreme_weights_select_one_image() {
        let a = rand_image(8, 8, 3, 6);
        let b = rand_image(8, 8, 3, 7);
        assert_eq!(mixup_with_lambda(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mixup_with_lambda(&a, &b, 0.0).unwrap(), b);
    }

    #[test]
    fn mixup_half_blends_constants() {
        let zero = Image::<f64>::zeros(4, 4, 1);
        let one = Image::from_pixels(Array3::from_elem((4, 4, 1), 1.0));
        let out = mixup_with_lambda(&one, &zero, 0.5).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn mixup_mean_is_linear_in_lambda() {
        let a = rand_image(8, 8, 3, 8);
        let b = rand_image(8, 8, 3, 9);
        for lam in [0.25, 0.5, 0.9] {
            let out = mixup_with_lambda(&a, &b, lam).unwrap();
            let expect = lam * a.mean() + (1.0 - lam) * b.mean();
            assert!((out.mean() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn mixup_samples_label_weight_from_beta() {
        let a = rand_image(4, 4, 1, 10);
        let b = rand_image(4, 4, 1, 11);
        let mut rng = seeded_rng(12);
        let (_, ml) = mixup(&a, 2, &b, 5, MIXUP_ALPHA, &mut rng).unwrap();
        assert_eq!((ml.first, ml.second), (2, 5));
        assert!((0.0..=1.0).contains(&ml.lam));
        assert!(mixup(&a, 0, &b, 0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn cutmix_extremes() {
        let a = rand_image(8, 8, 3, 13);
        let b = rand_image(8, 8, 3, 14);
        let (out, lam) = cutmix_with_box(&a, &b, 1.0, 4, 4).unwrap();
        assert_eq!(out, a);
        assert_eq!(lam, 1.0);
        // lam = 0 with a centered box covers everything
        let (out, lam) = cutmix_with_box(&a, &b, 0.0, 4, 4).unwrap();
        assert_eq!(out, b);
        assert_eq!(lam, 0.0);
    }

    #[test]
    fn cutmix_weight_matches_recounted_area() {
        let a = rand_image(16, 16, 3, 15);
        let b = rand_image(16, 16, 3, 16);
        for (lam, cy, cx) in [(0.3, 2, 14), (0.6, 0, 0), (0.5, 8, 8), (0.85, 15, 1)] {
            let (out, adj) = cutmix_with_box(&a, &b, lam, cy, cx).unwrap();
            // every pixel comes from a or b, nothing blended
            assert!(out.pixels().indexed_iter().all(|((r, c, ch), v)| {
                *v == a.pixels()[(r, c, ch)] || *v == b.pixels()[(r, c, ch)]
            }));
            // the two source images share no values, so counting b-pixels
            // recovers the exact pasted area
            let from_b = out
                .pixels()
                .indexed_iter()
                .filter(|((r, c, ch), v)| **v == b.pixels()[(*r, *c, *ch)])
                .count();
            let area = from_b / 3; // per-channel positions
            assert!(
                (adj - (1.0 - area as f64 / 256.0)).abs() < 1e-12,
                "lam {lam} at ({cy},{cx}): adj {adj} vs area {area}"
            );
        }
    }

    #[test]
    fn cutmix_shape_mismatch_is_rejected() {
        let a = rand_image(8, 8, 3, 17);
        let b = rand_image(8, 4, 3, 18);
        assert!(cutmix_with_box(&a, &b, 0.5, 0, 0).is_err());
        assert!(mixup_with_lambda(&a, &b, 0.5).is_err());
    }

    #[test]
    fn cutmix_sampling_is_deterministic_per_seed() {
        let a = rand_image(8, 8, 3, 19);
        let b = rand_image(8, 8, 3, 20);
        let run = |seed| {
            let mut rng = seeded_rng(seed);
            cutmix(&a, 0, &b, 1, CUTMIX_ALPHA, &mut rng).unwrap()
        };
        let (x, mlx) = run(21);
        let (y, mly) = run(21);
        assert_eq!(x, y);
        assert_eq!(mlx.lam.to_bits(), mly.lam.to_bits());
    }
}
