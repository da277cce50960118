//! Images, patch-grid geometry, block masks, and the patchify/unpatchify pair.
//!
//! Patches are indexed row-major over the grid: patch `i` covers pixel rows
//! `(i / grid_w) * P ..` and columns `(i % grid_w) * P ..`, each block `P` wide.

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense `H x W x C` pixel array. Values are in `[0, 1]` after load-time
/// scaling; reconstruction outputs are clamped back into that range.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<F> {
    pixels: Array3<F>,
}

impl<F: Scalar> Image<F> {
    /// Wraps a pixel array, validating finiteness and the `[0, 1]` range.
    /// Use at ingestion boundaries (dataset load, file decode).
    pub fn ingest(pixels: Array3<F>) -> Result<Self> {
        for &v in pixels.iter() {
            if !v.is_finite() {
                return Err(Error::validation("image contains a non-finite pixel"));
            }
            if v < F::zero() || v > F::one() {
                return Err(Error::validation(format!(
                    "pixel value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { pixels })
    }

    /// Wraps a pixel array produced by trusted internal math (no range scan).
    pub fn from_pixels(pixels: Array3<F>) -> Self {
        Self { pixels }
    }

    /// Wraps a pixel array, clamping every value into `[0, 1]`.
    pub fn from_clamped(mut pixels: Array3<F>) -> Self {
        pixels.mapv_inplace(|v| v.max(F::zero()).min(F::one()));
        Self { pixels }
    }

    /// All-zero image.
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { pixels: Array3::zeros((h, w, c)) }
    }

    pub fn pixels(&self) -> &Array3<F> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<F> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    /// Mean pixel value over all positions and channels.
    pub fn mean(&self) -> F {
        let n = self.pixels.len();
        if n == 0 {
            return F::zero();
        }
        self.pixels.iter().copied().sum::<F>() / crate::scalar::sc::<F>(n as f64)
    }

    /// Converts the element type (used to run f32 data through f64 checks).
    pub fn cast<G: Scalar>(&self) -> Image<G> {
        Image { pixels: self.pixels.mapv(|v| G::from_f64_lossy(v.to_f64_lossy())) }
    }
}

/// A batch of same-shape images with class labels and stable sample ids.
///
/// Ids are assigned at dataset construction and travel with the sample, so
/// per-sample random streams do not depend on batch position.
#[derive(Debug, Clone)]
pub struct ImageBatch<F> {
    pub images: Vec<Image<F>>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl<F: Scalar> ImageBatch<F> {
    pub fn new(images: Vec<Image<F>>, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if images.len() != labels.len() || images.len() != ids.len() {
            return Err(Error::validation(format!(
                "batch length mismatch: {} images, {} labels, {} ids",
                images.len(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self { images, labels, ids })
    }

    pub fn empty() -> Self {
        Self { images: Vec::new(), labels: Vec::new(), ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Number of distinct labels, assuming labels are `0..num_classes`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Sub-batch of the given indices, preserving labels and ids.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// First `n` samples (or all, when fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..self.len().min(n)).collect();
        self.select(&idx)
    }
}

/// Patch-grid arithmetic for a fixed patch side `P` on an `H x W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    patch: usize,
    grid_h: usize,
    grid_w: usize,
}

impl PatchGeometry {
    /// Builds the grid, requiring `P >= 1` and `P | H`, `P | W`.
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::geometry("patch size must be >= 1"));
        }
        if height % patch != 0 || width % patch != 0 {
            return Err(Error::geometry(format!(
                "patch size {patch} does not divide image {height}x{width}"
            )));
        }
        Ok(Self { patch, grid_h: height / patch, grid_w: width / patch })
    }

    pub fn for_image<F: Scalar>(img: &Image<F>, patch: usize) -> Result<Self> {
        Self::new(img.height(), img.width(), patch)
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn image_height(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn image_width(&self) -> usize {
        self.grid_w * self.patch
    }

    /// Top-left pixel (row, col) of patch `i` under row-major grid indexing.
    pub fn patch_origin(&self, i: usize) -> (usize, usize) {
        ((i / self.grid_w) * self.patch, (i % self.grid_w) * self.patch)
    }

    /// Grid coordinates (row, col) of patch `i`.
    pub fn patch_cell(&self, i: usize) -> (usize, usize) {
        (i / self.grid_w, i % self.grid_w)
    }

    fn check_image<F: Scalar>(&self, img: &Image<F>) -> Result<()> {
        if img.height() != self.image_height() || img.width() != self.image_width() {
            return Err(Error::geometry(format!(
                "image {}x{} does not match grid {}x{} of {}px patches",
                img.height(),
                img.width(),
                self.grid_h,
                self.grid_w,
                self.patch
            )));
        }
        Ok(())
    }
}

/// `H x W` array over {0, 1}, constant within each `P x P` block.
/// Bit 1 keeps the pixel; bit 0 erases it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    bits: Array2<u8>,
    geom: PatchGeometry,
}

impl BinaryMask {
    pub fn bits(&self) -> &Array2<u8> {
        &self.bits
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geom
    }

    /// Number of 1 bits.
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// True when the bits are uniform within every patch block.
    pub fn is_blockwise(&self) -> bool {
        let p = self.geom.patch_size();
        (0..self.geom.num_patches()).all(|i| {
            let (r0, c0) = self.geom.patch_origin(i);
            let block = self.bits.slice(s![r0..r0 + p, c0..c0 + p]);
            let first = block[(0, 0)];
            block.iter().all(|&b| b == first)
        })
    }
}

/// Ordered set of kept patch indices, each in `[0, N)`, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKIndexSet {
    indices: Vec<usize>,
}

impl TopKIndexSet {
    /// Normalizes (sorts ascending) and validates distinctness and range.
    pub fn new(mut indices: Vec<usize>, num_patches: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("duplicate patch index in keep set"));
        }
        if let Some(&last) = indices.last() {
            if last >= num_patches {
                return Err(Error::validation(format!(
                    "patch index {last} out of range for {num_patches} patches"
                )));
            }
        }
        Ok(Self { indices })
    }

    /// Uniform `k`-subset of `[0, n)` without replacement, deterministic per
    /// seed. Shared by pretraining mask sampling and the random strategy.
    pub fn random(num_patches: usize, k: usize, seed: u64) -> Result<Self> {
        if k > num_patches {
            return Err(Error::validation(format!(
                "cannot keep {k} of {num_patches} patches"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut all: Vec<usize> = (0..num_patches).collect();
        all.shuffle(&mut rng);
        all.truncate(k);
        Self::new(all, num_patches)
    }

    /// Keep set covering every patch.
    pub fn all(num_patches: usize) -> Self {
        Self { indices: (0..num_patches).collect() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Indices in `[0, n)` not present in this set, ascending.
    pub fn complement(&self, num_patches: usize) -> Vec<usize> {
        (0..num_patches).filter(|&i| !self.contains(i)).collect()
    }
}

/// Flattened patches: row `i` holds patch `i` as `P*P*C` values in row-major
/// pixel order with the channel index fastest.
pub type PatchSequence<F> = Array2<F>;

/// Splits an image into `N x (P*P*C)` flattened patches.
pub fn patchify<F: Scalar>(img: &Image<F>, geom: &PatchGeometry) -> Result<PatchSequence<F>> {
    geom.check_image(img)?;
    let p = geom.patch_size();
    let c = img.channels();
    let mut out = Array2::zeros((geom.num_patches(), p * p * c));
    for i in 0..geom.num_patches() {
        let (r0, c0) = geom.patch_origin(i);
        let block = img.pixels().slice(s![r0..r0 + p, c0..c0 + p, ..]);
        for (j, &v) in block.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify`]. `channels` disambiguates the trailing axis.
pub fn unpatchify<F: Scalar>(
    patches: &PatchSequence<F>,
    geom: &PatchGeometry,
    channels: usize,
) -> Result<Image<F>> {
    let p = geom.patch_size();
    if patches.nrows() != geom.num_patches() {
        return Err(Error::geometry(format!(
            "expected {} patches, got {}",
            geom.num_patches(),
            patches.nrows()
        )));
    }
    if patches.ncols() != p * p * channels {
        return Err(Error::geometry(format!(
            "expected patch length {}, got {}",
            p * p * channels,
            patches.ncols()
        )));
    }
    let mut pixels = Array3::zeros((geom.image_height(), geom.image_width(), channels));
    for i in 0..geom.num_patches() {
        let (r0, c0) = geom.patch_origin(i);
        let mut block = pixels.slice_mut(s![r0..r0 + p, c0..c0 + p, ..]);
        for (j, v) in block.iter_mut().enumerate() {
            *v = patches[(i, j)];
        }
    }
    Ok(Image::from_pixels(pixels))
}

/// Builds the block mask that is 1 exactly on the kept patches.
pub fn mask_from_indices(keep: &TopKIndexSet, geom: &PatchGeometry) -> Result<BinaryMask> {
    if let Some(&last) = keep.indices().last() {
        if last >= geom.num_patches() {
            return Err(Error::validation(format!(
                "keep index {last} out of range for {} patches",
                geom.num_patches()
            )));
        }
    }
    let p = geom.patch_size();
    let mut bits = Array2::zeros((geom.image_height(), geom.image_width()));
    for &i in keep.indices() {
        let (r0, c0) = geom.patch_origin(i);
        bits.slice_mut(s![r0..r0 + p, c0..c0 + p]).fill(1);
    }
    Ok(BinaryMask { bits, geom: *geom })
}

/// Elementwise product of image and mask: masked pixels become exactly 0.
pub fn apply_mask<F: Scalar>(img: &Image<F>, mask: &BinaryMask) -> Result<Image<F>> {
    if img.height() != mask.bits.nrows() || img.width() != mask.bits.ncols() {
        return Err(Error::geometry(format!(
            "image {}x{} vs mask {}x{}",
            img.height(),
            img.width(),
            mask.bits.nrows(),
            mask.bits.ncols()
        )));
    }
    let mut pixels = img.pixels().clone();
    for ((h, w, _), v) in pixels.indexed_iter_mut() {
        if mask.bits[(h, w)] == 0 {
            *v = F::zero();
        }
    }
    Ok(Image::from_pixels(pixels))
}
