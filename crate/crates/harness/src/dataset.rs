//! Dataset loading: CIFAR-10 binary batches, class-per-folder image trees,
//! and deterministic synthetic sets for pipeline tests.
//!
//! Identifier grammar:
//!   `synthetic:two-blobs[:TRAIN[:EVAL]]`  2 classes, separable
//!   `synthetic:gradients[:TRAIN[:EVAL]]`  unlabeled ramps for pretraining
//!   `synthetic:shapes[:TRAIN[:EVAL]]`     4 classes with shared textures
//!   `cifar10:PATH`                        directory of *_batch*.bin files
//!   `folder:PATH`                         subdirectory name = class name
//!   anything else                         treated as a path and sniffed
//!
//! Relative paths resolve against `MRA_DATA_DIR` when that is set.

use mra_core::image::{Image, ImageBatch};
use mra_core::{Error, Result};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Offset added to eval ids so train/eval streams never collide.
const EVAL_ID_BASE: u64 = 1 << 32;

#[derive(Clone)]
pub struct Dataset {
    pub name: String,
    pub train: ImageBatch<f32>,
    pub eval: ImageBatch<f32>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn image_side(&self) -> usize {
        self.train.images.first().map(|i| i.height()).unwrap_or(0)
    }

    pub fn channels(&self) -> usize {
        self.train.images.first().map(|i| i.channels()).unwrap_or(0)
    }

    /// Deterministically trims both splits, keeping the leading records.
    pub fn limited(mut self, train: Option<usize>, eval: Option<usize>) -> Self {
        if let Some(n) = train {
            self.train = self.train.take(n);
        }
        if let Some(n) = eval {
            self.eval = self.eval.take(n);
        }
        self
    }
}

/// Per-channel mean and standard deviation over a batch, for input scaling.
pub fn channel_stats(batch: &ImageBatch<f32>) -> (Vec<f32>, Vec<f32>) {
    let c_n = batch.images.first().map(|i| i.channels()).unwrap_or(0);
    let mut sum = vec![0.0f64; c_n];
    let mut sum_sq = vec![0.0f64; c_n];
    let mut count = vec![0u64; c_n];
    for img in &batch.images {
        for ((_, _, c), v) in img.pixels().indexed_iter() {
            sum[c] += *v as f64;
            sum_sq[c] += (*v as f64) * (*v as f64);
            count[c] += 1;
        }
    }
    let mean: Vec<f32> = (0..c_n).map(|c| (sum[c] / count[c].max(1) as f64) as f32).collect();
    let std: Vec<f32> = (0..c_n)
        .map(|c| {
            let m = sum[c] / count[c].max(1) as f64;
            let var = sum_sq[c] / count[c].max(1) as f64 - m * m;
            (var.max(1e-8)).sqrt() as f32
        })
        .collect();
    (mean, std)
}

pub fn load_dataset(id: &str) -> Result<Dataset> {
    if let Some(rest) = id.strip_prefix("synthetic:") {
        return load_synthetic(rest);
    }
    if let Some(path) = id.strip_prefix("cifar10:") {
        return load_cifar10(&resolve(path));
    }
    if let Some(path) = id.strip_prefix("folder:") {
        return load_image_folder(&resolve(path));
    }
    let path = resolve(id);
    if !path.exists() {
        return Err(Error::validation(format!(
            "dataset {id:?} is neither a synthetic name nor an existing path"
        )));
    }
    if path.join("data_batch_1.bin").exists() || path.join("test_batch.bin").exists() {
        load_cifar10(&path)
    } else {
        load_image_folder(&path)
    }
}

fn resolve(path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    if p.is_relative() && !p.exists() {
        if let Ok(root) = std::env::var("MRA_DATA_DIR") {
            let under = Path::new(&root).join(&p);
            if under.exists() {
                return under;
            }
        }
    }
    p
}

// --- CIFAR-10 binary ------------------------------------------------------

/// One binary batch file: records of 1 label byte + 3072 channel-planar pixels.
pub fn parse_cifar_file(bytes: &[u8], id_base: u64) -> Result<(Vec<Image<f32>>, Vec<usize>, Vec<u64>)> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD_BYTES;
        return Err(Error::validation(format!(
            "corrupt data: file length {} is not a multiple of the {CIFAR_RECORD_BYTES}-byte \
             record, trailing fragment starts at byte {offset}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD_BYTES..(r + 1) * CIFAR_RECORD_BYTES];
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::validation(format!(
                "corrupt data: label {label} at byte {}",
                r * CIFAR_RECORD_BYTES
            )));
        }
        let mut pixels = Array3::<f32>::zeros((CIFAR_SIDE, CIFAR_SIDE, 3));
        for c in 0..3 {
            for y in 0..CIFAR_SIDE {
                for x in 0..CIFAR_SIDE {
                    let byte = rec[1 + c * CIFAR_SIDE * CIFAR_SIDE + y * CIFAR_SIDE + x];
                    pixels[(y, x, c)] = byte as f32 / 255.0;
                }
            }
        }
        images.push(Image::from_pixels(pixels));
        labels.push(label);
        ids.push(id_base + r as u64);
    }
    Ok((images, labels, ids))
}

pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let dir = if dir.join("data_batch_1.bin").exists() {
        dir.to_path_buf()
    } else {
        // Tolerate pointing at the extracted archive's parent.
        let nested = dir.join("cifar-10-batches-bin");
        if nested.join("data_batch_1.bin").exists() {
            nested
        } else {
            return Err(Error::validation(format!(
                "no data_batch_1.bin under {}",
                dir.display()
            )));
        }
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::validation(format!("reading {}: {e}", path.display())))?;
        let (im, la, id) = parse_cifar_file(&bytes, (i as u64 - 1) * 10_000)?;
        images.extend(im);
        labels.extend(la);
        ids.extend(id);
    }
    let test_path = dir.join("test_batch.bin");
    let bytes = std::fs::read(&test_path)
        .map_err(|e| Error::validation(format!("reading {}: {e}", test_path.display())))?;
    let (ev_im, ev_la, ev_id) = parse_cifar_file(&bytes, EVAL_ID_BASE)?;
    Ok(Dataset {
        name: "cifar10".into(),
        train: ImageBatch::new(images, labels, ids)?,
        eval: ImageBatch::new(ev_im, ev_la, ev_id)?,
        num_classes: 10,
    })
}

// --- image folders --------------------------------------------------------

/// Subdirectory names are class names (sorted order fixes the ids); every
/// tenth file per class goes to the eval split.
pub fn load_image_folder(dir: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::validation(format!("reading {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::validation(format!(
            "empty dataset: no class subdirectories under {}",
            dir.display()
        )));
    }
    let mut train = (Vec::new(), Vec::new(), Vec::new());
    let mut eval = (Vec::new(), Vec::new(), Vec::new());
    let mut next_id = 0u64;
    for (class, cdir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(cdir)
            .map_err(|e| Error::validation(format!("reading {}: {e}", cdir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png") | Some("jpg") | Some("jpeg")
                )
            })
            .collect();
        files.sort();
        for (i, file) in files.iter().enumerate() {
            let img = load_image_file(file)?;
            if i % 10 == 9 {
                eval.0.push(img);
                eval.1.push(class);
                eval.2.push(EVAL_ID_BASE + next_id);
            } else {
                train.0.push(img);
                train.1.push(class);
                train.2.push(next_id);
            }
            next_id += 1;
        }
    }
    if train.0.is_empty() {
        return Err(Error::validation(format!(
            "empty dataset: class folders under {} contain no images",
            dir.display()
        )));
    }
    Ok(Dataset {
        name: "folder".into(),
        num_classes: class_dirs.len(),
        train: ImageBatch::new(train.0, train.1, train.2)?,
        eval: ImageBatch::new(eval.0, eval.1, eval.2)?,
    })
}

fn load_image_file(path: &Path) -> Result<Image<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::validation(format!("decoding {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = Array3::<f32>::zeros((h, w, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[(y as usize, x as usize, c)] = p.0[c] as f32 / 255.0;
        }
    }
    Image::ingest(pixels)
}

// --- synthetic sets -------------------------------------------------------

fn load_synthetic(rest: &str) -> Result<Dataset> {
    let mut parts = rest.split(':');
    let name = parts.next().unwrap_or("");
    let (train_default, eval_default) = match name {
        "two-blobs" => (512, 256),
        "gradients" => (5_000, 512),
        "shapes" => (2_000, 1_000),
        other => {
            return Err(Error::validation(format!(
                "unknown synthetic dataset {other:?}; have two-blobs, gradients, shapes"
            )))
        }
    };
    let parse = |s: Option<&str>, dflt: usize| -> Result<usize> {
        match s {
            None => Ok(dflt),
            Some(v) => v
                .parse()
                .map_err(|_| Error::validation(format!("bad count {v:?} in dataset id"))),
        }
    };
    let n_train = parse(parts.next(), train_default)?;
    let n_eval = parse(parts.next(), eval_default)?;
    let gen: fn(u64) -> (Image<f32>, usize) = match name {
        "two-blobs" => two_blobs_sample,
        "gradients" => gradient_sample,
        _ => shapes_sample,
    };
    let make = |count: usize, id_base: u64| -> Result<ImageBatch<f32>> {
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            let id = id_base + i as u64;
            let (img, label) = gen(id);
            images.push(img);
            labels.push(label);
            ids.push(id);
        }
        ImageBatch::new(images, labels, ids)
    };
    let num_classes = match name {
        "two-blobs" => 2,
        "gradients" => 1,
        _ => 4,
    };
    Ok(Dataset {
        name: format!("synthetic:{name}"),
        train: make(n_train, 0)?,
        eval: make(n_eval, EVAL_ID_BASE)?,
        num_classes,
    })
}

fn sample_rng(id: u64) -> ChaCha8Rng {
    // Separate stream per sample so ids, not positions, decide content.
    ChaCha8Rng::seed_from_u64(mra_core::augment::derive_seed(0x5E7_DA7A, id))
}

/// Two classes: a bright Gaussian blob in the upper-left or lower-right
/// quadrant. Linearly separable by pixel mass location.
fn two_blobs_sample(id: u64) -> (Image<f32>, usize) {
    let mut rng = sample_rng(id);
    let label = (rng.gen::<u32>() % 2) as usize;
    let (cy, cx) = if label == 0 {
        (rng.gen_range(6.0..12.0), rng.gen_range(6.0..12.0))
    } else {
        (rng.gen_range(20.0..26.0), rng.gen_range(20.0..26.0))
    };
    let sigma: f64 = rng.gen_range(3.0..5.0);
    let tint = [rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0)];
    let base = rng.gen_range(0.05..0.15);
    let mut pixels = Array3::<f32>::zeros((32, 32, 3));
    for ((y, x, c), v) in pixels.indexed_iter_mut() {
        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
        let blob = (-d2 / (2.0 * sigma * sigma)).exp();
        let noise = 0.02 * (rng_f32(&mut rng) - 0.5);
        *v = ((base + blob * tint[c]) as f32 + noise).clamp(0.0, 1.0);
    }
    (Image::from_pixels(pixels), label)
}

/// Unlabeled smooth ramps: a linear field with random direction and offset.
/// Good reconstruction targets with nonzero variance everywhere.
fn gradient_sample(id: u64) -> (Image<f32>, usize) {
    let mut rng = sample_rng(id);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let scale: f64 = rng.gen_range(0.5..1.0) / 32.0;
    let offset: f64 = rng.gen_range(0.0..1.0);
    let chan_shift = [0.0, rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    let mut pixels = Array3::<f32>::zeros((32, 32, 3));
    for ((y, x, c), v) in pixels.indexed_iter_mut() {
        let t = (y as f64 * theta.sin() + x as f64 * theta.cos()) * scale + offset + chan_shift[c];
        // Triangle wave keeps values in range without flat clipping plateaus.
        let folded = (t.rem_euclid(2.0) - 1.0).abs();
        *v = folded as f32;
    }
    (Image::from_pixels(pixels), 0)
}

/// Four shape classes on noisy backgrounds: filled square, disk, plus sign,
/// horizontal stripes. The shape is the only class evidence, so erasing
/// foreground patches destroys label information while erasing background
/// does not.
fn shapes_sample(id: u64) -> (Image<f32>, usize) {
    let mut rng = sample_rng(id);
    let label = (rng.gen::<u32>() % 4) as usize;
    let base: f32 = rng.gen_range(0.1..0.3);
    let fg: f32 = rng.gen_range(0.7..1.0);
    let cy: i64 = rng.gen_range(12..20);
    let cx: i64 = rng.gen_range(12..20);
    let half: i64 = rng.gen_range(5..9);
    let tint = [fg, rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
    let mut pixels = Array3::<f32>::zeros((32, 32, 3));
    for ((y, x, c), v) in pixels.indexed_iter_mut() {
        let (dy, dx) = (y as i64 - cy, x as i64 - cx);
        let inside = match label {
            0 => dy.abs() <= half && dx.abs() <= half,
            1 => dy * dy + dx * dx <= half * half,
            2 => (dy.abs() <= half / 2 && dx.abs() <= half) || (dx.abs() <= half / 2 && dy.abs() <= half),
            _ => dy.abs() <= half && (y / 3) % 2 == 0,
        };
        let noise = 0.04 * (rng_f32(&mut rng) - 0.5);
        *v = if inside { tint[c] } else { base } + noise;
        *v = v.clamp(0.0, 1.0);
    }
    (Image::from_pixels(pixels), label)
}

fn rng_f32(rng: &mut ChaCha8Rng) -> f32 {
    rng.gen::<f32>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_sets_are_deterministic_and_sized() {
        let a = load_dataset("synthetic:two-blobs:64:32").unwrap();
        let b = load_dataset("synthetic:two-blobs:64:32").unwrap();
        assert_eq!(a.train.len(), 64);
        assert_eq!(a.eval.len(), 32);
        assert_eq!(a.num_classes, 2);
        for (x, y) in a.train.images.iter().zip(&b.train.images) {
            assert_eq!(x, y);
        }
        assert_eq!(a.train.labels, b.train.labels);
    }

    #[test]
    fn synthetic_content_depends_on_id_not_position() {
        let big = load_dataset("synthetic:shapes:100:10").unwrap();
        let small = load_dataset("synthetic:shapes:50:10").unwrap();
        for i in 0..50 {
            assert_eq!(big.train.images[i], small.train.images[i]);
        }
    }

    #[test]
    fn train_and_eval_ids_are_disjoint() {
        let d = load_dataset("synthetic:gradients:30:30").unwrap();
        for id in &d.eval.ids {
            assert!(!d.train.ids.contains(id));
        }
    }

    #[test]
    fn shapes_cover_all_classes() {
        let d = load_dataset("synthetic:shapes:200:50").unwrap();
        for c in 0..4 {
            assert!(d.train.labels.iter().any(|&l| l == c), "class {c} missing");
        }
    }

    #[test]
    fn cifar_records_parse_by_fixed_layout() {
        // Two records: label then 3072 bytes, red plane first.
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        bytes[0] = 7;
        bytes[1] = 255; // record 0, red channel, pixel (0,0)
        bytes[CIFAR_RECORD_BYTES] = 2;
        bytes[CIFAR_RECORD_BYTES + 1 + 1024 + 33] = 128; // record 1, green, (1,1)
        let (images, labels, ids) = parse_cifar_file(&bytes, 5).unwrap();
        assert_eq!(labels, vec![7, 2]);
        assert_eq!(ids, vec![5, 6]);
        assert!((images[0].pixels()[(0, 0, 0)] - 1.0).abs() < 1e-6);
        assert!((images[1].pixels()[(1, 1, 1)] - 128.0 / 255.0).abs() < 1e-3);
        assert_eq!(images[0].pixels()[(0, 0, 1)], 0.0);
    }

    #[test]
    fn truncated_cifar_file_reports_offset() {
        let bytes = vec![0u8; CIFAR_RECORD_BYTES + 100];
        let err = parse_cifar_file(&bytes, 0).unwrap_err().to_string();
        assert!(err.contains("3073"), "{err}");
        assert!(err.contains(&CIFAR_RECORD_BYTES.to_string()), "{err}");
    }

    #[test]
    fn bad_label_is_rejected() {
        let mut bytes = vec![0u8; CIFAR_RECORD_BYTES];
        bytes[0] = 10;
        assert!(parse_cifar_file(&bytes, 0).is_err());
    }

    #[test]
    fn image_folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["a_first", "b_second"] {
            let cdir = dir.path().join(class);
            std::fs::create_dir(&cdir).unwrap();
            for i in 0..12 {
                let mut img = image::RgbImage::new(8, 8);
                for p in img.pixels_mut() {
                    p.0 = [i * 20, 0, if class == "a_first" { 200 } else { 20 }];
                }
                img.save(cdir.join(format!("{i:02}.png"))).unwrap();
            }
        }
        let d = load_image_folder(dir.path()).unwrap();
        assert_eq!(d.num_classes, 2);
        assert_eq!(d.train.len(), 22); // 11 per class, every 10th file held out
        assert_eq!(d.eval.len(), 2);
        assert_eq!(d.train.labels.iter().filter(|&&l| l == 0).count(), 11);
    }

    #[test]
    fn empty_folder_is_an_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_image_folder(dir.path()).unwrap_err().to_string();
        assert!(err.contains("empty dataset"), "{err}");
    }

    #[test]
    fn unknown_ids_are_rejected() {
        assert!(load_dataset("synthetic:nonsense").is_err());
        assert!(load_dataset("no/such/path/anywhere").is_err());
    }

    #[test]
    fn channel_stats_match_hand_computation() {
        let flat = Image::<f32>::from_pixels(Array3::from_elem((2, 2, 1), 0.25));
        let bright = Image::<f32>::from_pixels(Array3::from_elem((2, 2, 1), 0.75));
        let batch = ImageBatch::new(vec![flat, bright], vec![0, 0], vec![0, 1]).unwrap();
        let (mean, std) = channel_stats(&batch);
        assert!((mean[0] - 0.5).abs() < 1e-6);
        assert!((std[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn limits_trim_the_leading_records() {
        let d = load_dataset("synthetic:shapes:40:20").unwrap().limited(Some(10), Some(5));
        assert_eq!(d.train.len(), 10);
        assert_eq!(d.eval.len(), 5);
    }
}
