//! Downstream supervised training with a pluggable augmentation arm.
//!
//! Registered arm names: none, cutout, mixup, cutmix, mra, mra_mask_only,
//! mra+cutmix. Batch order each step: crop/flip, then the arm, then channel
//! normalization. Mixing arms carry two-class labels into the loss.

use crate::checkpoint::{dump_params, load_params, Checkpoint};
use crate::config::{Task, TrainConfig};
use crate::dataset::{channel_stats, load_dataset, Dataset};
use crate::manifest::{atomic_write, write_manifest};
use crate::metrics::{to_csv, validate_rows, EpochRow, RunSummary};
use crate::pretrain::epoch_order;
use crate::resnet::{images_to_tensor, ClassifierConfig, SmallResNet};
use mra_core::attmask::{MaskStrategy, MaskingPolicy};
use mra_core::augment::{derive_seed, AugmentorHandle};
use mra_core::baselines::{cutmix, cutout, mixup, CUTMIX_ALPHA, MIXUP_ALPHA};
use mra_core::image::{Image, ImageBatch};
use mra_core::mae::{keep_count, MaskedAutoencoderParams};
use mra_core::nn::params::param_hash_hex;
use mra_core::nn::{accuracy, argmax_rows, cross_entropy_mixed, MixedLabel, Optimizer};
use mra_core::{Error, Result};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

const AUG_STREAM: u64 = 0x6175_6700;
const CROP_PAD: usize = 4;

pub const AUGMENTOR_NAMES: [&str; 7] =
    ["none", "cutout", "mixup", "cutmix", "mra", "mra_mask_only", "mra+cutmix"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArmKind {
    None,
    Cutout,
    Mixup,
    Cutmix,
    Mra,
    MraMaskOnly,
    MraCutmix,
}

impl ArmKind {
    pub fn needs_checkpoint(self) -> bool {
        matches!(self, ArmKind::Mra | ArmKind::MraMaskOnly | ArmKind::MraCutmix)
    }
}

pub fn parse_augmentor(name: &str) -> Result<ArmKind> {
    match name {
        "none" => Ok(ArmKind::None),
        "cutout" => Ok(ArmKind::Cutout),
        "mixup" => Ok(ArmKind::Mixup),
        "cutmix" => Ok(ArmKind::Cutmix),
        "mra" => Ok(ArmKind::Mra),
        "mra_mask_only" => Ok(ArmKind::MraMaskOnly),
        "mra+cutmix" => Ok(ArmKind::MraCutmix),
        other => Err(Error::validation(format!(
            "unknown augmentor {other:?}; registered: {}",
            AUGMENTOR_NAMES.join(", ")
        ))),
    }
}

/// A constructed augmentation arm. The reconstruction-based arms own the
/// frozen autoencoder handle.
pub enum AugmentorArm {
    None,
    Cutout { hole: usize },
    Mixup,
    Cutmix,
    Mra(AugmentorHandle<f32>),
    MraMaskOnly(AugmentorHandle<f32>),
    MraCutmix(AugmentorHandle<f32>),
}

/// Loads the frozen autoencoder named by `mae_checkpoint`.
pub fn load_frozen_mae(path: &Path) -> Result<MaskedAutoencoderParams<f32>> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind("mae")?;
    let config: mra_core::mae::MaeConfig = ckpt.config_as()?;
    let mut params = MaskedAutoencoderParams::<f32>::init(config, 0)?;
    load_params(&mut params, &ckpt.tensor_map()?)?;
    Ok(params)
}

pub fn build_arm(cfg: &TrainConfig) -> Result<AugmentorArm> {
    let kind = parse_augmentor(&cfg.augmentor)?;
    if !kind.needs_checkpoint() {
        return Ok(match kind {
            ArmKind::None => AugmentorArm::None,
            // Standard hole: half the image side.
            ArmKind::Cutout => AugmentorArm::Cutout { hole: 0 },
            ArmKind::Mixup => AugmentorArm::Mixup,
            ArmKind::Cutmix => AugmentorArm::Cutmix,
            _ => unreachable!(),
        });
    }
    let path = cfg.mae_checkpoint.as_ref().ok_or_else(|| {
        Error::validation(format!(
            "augmentor {:?} needs mae_checkpoint (a pretrained autoencoder)",
            cfg.augmentor
        ))
    })?;
    let params = load_frozen_mae(Path::new(path))?;
    let n = params.config.num_patches();
    let policy = MaskingPolicy {
        strategy: MaskStrategy::parse(&cfg.strategy)?,
        keep_count: keep_count(n, cfg.effective_aug_ratio()),
        rng_seed: 0,
    };
    let handle = AugmentorHandle::new(params, policy, cfg.apply_probability, cfg.score_mode)?;
    Ok(match kind {
        ArmKind::Mra => AugmentorArm::Mra(handle),
        ArmKind::MraMaskOnly => AugmentorArm::MraMaskOnly(handle),
        ArmKind::MraCutmix => AugmentorArm::MraCutmix(handle),
        _ => unreachable!(),
    })
}

impl AugmentorArm {
    pub fn handle(&self) -> Option<&AugmentorHandle<f32>> {
        match self {
            AugmentorArm::Mra(h) | AugmentorArm::MraMaskOnly(h) | AugmentorArm::MraCutmix(h) => {
                Some(h)
            }
            _ => None,
        }
    }

    /// Applies the arm to one batch. Returns augmented images, per-sample
    /// labels, and how many augmentor forward passes ran.
    pub fn apply(
        &self,
        batch: &ImageBatch<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Image<f32>>, Vec<MixedLabel<f32>>, u64)> {
        let hard = || batch.labels.iter().map(|&l| MixedLabel::hard(l)).collect::<Vec<_>>();
        match self {
            AugmentorArm::None => Ok((batch.images.clone(), hard(), 0)),
            AugmentorArm::Cutout { hole } => {
                let hole = if *hole == 0 {
                    batch.images.first().map(|i| i.height() / 2).unwrap_or(0)
                } else {
                    *hole
                };
                let mut out = Vec::with_capacity(batch.len());
                for img in &batch.images {
                    out.push(cutout(img, hole, rng)?);
                }
                Ok((out, hard(), 0))
            }
            AugmentorArm::Mixup => {
                let partners = shuffled(batch.len(), rng);
                let mut images = Vec::with_capacity(batch.len());
                let mut labels = Vec::with_capacity(batch.len());
                for (i, &j) in partners.iter().enumerate() {
                    let (img, lab) = mixup(
                        &batch.images[i],
                        batch.labels[i],
                        &batch.images[j],
                        batch.labels[j],
                        MIXUP_ALPHA,
                        rng,
                    )?;
                    images.push(img);
                    labels.push(lab);
                }
                Ok((images, labels, 0))
            }
            AugmentorArm::Cutmix => {
                let (images, labels) = cutmix_pairs(&batch.images, &batch.labels, rng)?;
                Ok((images, labels, 0))
            }
            AugmentorArm::Mra(h) => {
                let aug = h.augment_batch(batch, rng)?;
                Ok((aug.images, hard(), batch.len() as u64))
            }
            AugmentorArm::MraMaskOnly(h) => {
                let mut out = Vec::with_capacity(batch.len());
                for img in &batch.images {
                    out.push(h.mask_only(img, rng)?);
                }
                Ok((out, hard(), batch.len() as u64))
            }
            AugmentorArm::MraCutmix(h) => {
                // CutMix over two reconstruction-augmented views.
                let aug = h.augment_batch(batch, rng)?;
                let (images, labels) = cutmix_pairs(&aug.images, &batch.labels, rng)?;
                Ok((images, labels, batch.len() as u64))
            }
        }
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn cutmix_pairs(
    images: &[Image<f32>],
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Image<f32>>, Vec<MixedLabel<f32>>)> {
    let partners = shuffled(images.len(), rng);
    let mut out_images = Vec::with_capacity(images.len());
    let mut out_labels = Vec::with_capacity(images.len());
    for (i, &j) in partners.iter().enumerate() {
        let (img, lab) =
            cutmix(&images[i], labels[i], &images[j], labels[j], CUTMIX_ALPHA, rng)?;
        out_images.push(img);
        out_labels.push(lab);
    }
    Ok((out_images, out_labels))
}

/// Zero-pad by 4, crop back at a uniform offset, flip horizontally with
/// probability one half.
pub fn crop_flip(img: &Image<f32>, rng: &mut ChaCha8Rng) -> Image<f32> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let dy = rng.gen_range(0..=2 * CROP_PAD);
    let dx = rng.gen_range(0..=2 * CROP_PAD);
    let flip = rng.gen::<bool>();
    let src = img.pixels();
    let mut out = Array3::<f32>::zeros((h, w, c));
    for ((y, x, ch), v) in out.indexed_iter_mut() {
        let sy = y as isize + dy as isize - CROP_PAD as isize;
        let sx_logical = if flip { w - 1 - x } else { x };
        let sx = sx_logical as isize + dx as isize - CROP_PAD as isize;
        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
            *v = src[(sy as usize, sx as usize, ch)];
        }
    }
    Image::from_pixels(out)
}

/// Weighted top-1 agreement against mixed labels.
fn mixed_accuracy(logits: &ndarray::Array2<f32>, labels: &[MixedLabel<f32>]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let preds = argmax_rows(logits);
    let mut acc = 0.0f64;
    for (p, l) in preds.iter().zip(labels) {
        let lam = l.lam as f64;
        acc += lam * (*p == l.first) as u8 as f64 + (1.0 - lam) * (*p == l.second) as u8 as f64;
    }
    acc / labels.len() as f64
}

pub struct ClassifyOutcome {
    pub rows: Vec<EpochRow>,
    pub summary: RunSummary,
    pub final_checkpoint: PathBuf,
    pub run_dir: PathBuf,
    pub final_eval_acc: f64,
    pub best_eval_acc: f64,
}

/// Top-1 accuracy over a split, eval-mode network, normalization only.
pub fn evaluate(
    net: &SmallResNet<f32>,
    batch: &ImageBatch<f32>,
    stats: &(Vec<f32>, Vec<f32>),
    chunk: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0.0f64;
    let idx: Vec<usize> = (0..batch.len()).collect();
    for chunk_idx in idx.chunks(chunk.max(1)) {
        let sub = batch.select(chunk_idx);
        let x = images_to_tensor(&sub.images, &stats.0, &stats.1)?;
        let logits = net.forward_eval(&x)?;
        hits += accuracy(&logits, &sub.labels) * sub.len() as f64;
    }
    Ok(hits / batch.len() as f64)
}

pub fn save_classifier(
    net: &SmallResNet<f32>,
    path: &Path,
    step: u64,
    epoch: u64,
) -> Result<()> {
    let mut tensors = dump_params(net);
    for (name, data) in net.export_buffers() {
        let len = data.len();
        tensors.push((name, vec![len], data));
    }
    Checkpoint::build(
        "classifier",
        serde_json::to_value(&net.config).expect("classifier config serializes"),
        step,
        epoch,
        tensors,
        None,
        None,
    )
    .save(path)
}

pub fn load_classifier(path: &Path) -> Result<SmallResNet<f32>> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind("classifier")?;
    let config: ClassifierConfig = ckpt.config_as()?;
    let mut net = SmallResNet::<f32>::init(config, 0)?;
    let mut tensors = ckpt.tensor_map()?;
    let mut buffers = Vec::new();
    let buffer_names: Vec<String> = tensors
        .keys()
        .filter(|n| n.ends_with(".running_mean") || n.ends_with(".running_var"))
        .cloned()
        .collect();
    for name in buffer_names {
        let (_, data) = tensors.remove(&name).unwrap();
        buffers.push((name, data));
    }
    load_params(&mut net, &tensors)?;
    net.import_buffers(&buffers)?;
    Ok(net)
}

pub fn run_classification(cfg: &TrainConfig) -> Result<ClassifyOutcome> {
    if cfg.task != Task::Classify {
        return Err(Error::validation("config task is not classify"));
    }
    cfg.validate()?;
    let run_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| Error::state(format!("creating {}: {e}", run_dir.display())))?;
    atomic_write(&run_dir.join("config.json"), cfg.to_json().as_bytes())?;

    let dataset = load_dataset(&cfg.dataset)?.limited(cfg.train_limit, cfg.eval_limit);
    if dataset.train.is_empty() || dataset.eval.is_empty() {
        return Err(Error::validation("both splits must be non-empty"));
    }
    let num_classes = dataset.num_classes.max(2);
    let net_cfg = ClassifierConfig {
        image_size: dataset.image_side(),
        channels: dataset.channels(),
        widths: ClassifierConfig::small(num_classes).widths,
        num_classes,
    };
    let mut net = SmallResNet::<f32>::init(net_cfg, cfg.seed)?;
    let arm = build_arm(cfg)?;
    if let Some(h) = arm.handle() {
        if h.config().image_size != dataset.image_side() || h.config().channels != dataset.channels()
        {
            return Err(Error::geometry(format!(
                "augmentor expects {}x{} x{} images, dataset provides {}x{} x{}",
                h.config().image_size,
                h.config().image_size,
                h.config().channels,
                dataset.image_side(),
                dataset.image_side(),
                dataset.channels()
            )));
        }
    }
    let hash_before = arm.handle().map(|h| h.frozen_hash_hex());
    let stats = channel_stats(&dataset.train);

    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, AUG_STREAM));
    let mut rows = Vec::new();
    let mut augment_calls = 0u64;
    let mut best_eval_acc = 0.0f64;
    let mut best_epoch = 0usize;
    let mut global_step = 0u64;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let order = epoch_order(dataset.train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut acc_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let sub = dataset.train.select(chunk);
            let cropped: Vec<Image<f32>> = if cfg.crop_flip {
                sub.images.iter().map(|i| crop_flip(i, &mut aug_rng)).collect()
            } else {
                sub.images.clone()
            };
            let staged = ImageBatch::new(cropped, sub.labels.clone(), sub.ids.clone())?;
            let (aug_images, labels, calls) = arm.apply(&staged, &mut aug_rng)?;
            augment_calls += calls;

            let x = images_to_tensor(&aug_images, &stats.0, &stats.1)?;
            let (logits, cache) = net.forward_train(&x)?;
            let (loss, dlogits) = cross_entropy_mixed(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite training loss {loss}; aborting"
                )));
            }
            let mut grad = net.zeros_like();
            net.backward(&cache, &dlogits, &mut grad)?;
            let lr = cfg.schedule.lr(
                cfg.lr,
                global_step as f64
                    / (cfg.epochs * dataset.train.len().div_ceil(cfg.batch_size)).max(1) as f64,
                epoch as f64 / cfg.epochs as f64,
            );
            opt.set_lr(lr);
            opt.step(&mut net, &grad)?;

            loss_sum += loss as f64 * labels.len() as f64;
            acc_sum += mixed_accuracy(&logits, &labels) * labels.len() as f64;
            seen += labels.len();
            global_step += 1;
        }
        let eval_acc = evaluate(&net, &dataset.eval, &stats, cfg.eval_batch)?;
        if eval_acc > best_eval_acc {
            best_eval_acc = eval_acc;
            best_epoch = epoch + 1;
        }
        let train_loss = loss_sum / seen as f64;
        let train_acc = acc_sum / seen as f64;
        rows.push(EpochRow {
            epoch: epoch + 1,
            train_loss,
            train_acc: Some(train_acc),
            eval_acc: Some(eval_acc),
            seconds: t0.elapsed().as_secs_f64(),
        });
        println!(
            "epoch {}/{} train_loss {train_loss:.4} train_acc {train_acc:.4} eval_acc {eval_acc:.4} ({:.1}s)",
            epoch + 1,
            cfg.epochs,
            t0.elapsed().as_secs_f64()
        );
    }
    validate_rows(&rows)?;

    if let Some(h) = arm.handle() {
        h.verify_frozen()?;
    }
    let final_checkpoint = run_dir.join("final.ckpt");
    save_classifier(&net, &final_checkpoint, global_step, cfg.epochs as u64)?;
    let final_eval_acc = rows.last().and_then(|r| r.eval_acc).unwrap_or(0.0);
    let summary = RunSummary {
        task: "classify".into(),
        config_sha256: cfg.hash_hex(),
        epochs: cfg.epochs,
        final_train_loss: rows.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
        final_eval_acc: Some(final_eval_acc),
        best_eval_acc: Some(best_eval_acc),
        best_epoch: Some(best_epoch),
        param_sha256: param_hash_hex(&net),
        augmentor_sha256_before: hash_before,
        augmentor_sha256_after: arm.handle().map(|h| h.current_hash_hex()),
        augment_calls: Some(augment_calls),
        checkpoint: Some("final.ckpt".into()),
        ..RunSummary::default()
    };
    atomic_write(&run_dir.join("metrics.csv"), to_csv(&rows).as_bytes())?;
    atomic_write(
        &run_dir.join("summary.json"),
        serde_json::to_vec_pretty(&summary).expect("summary serializes").as_slice(),
    )?;
    write_manifest(&run_dir, &cfg.hash_hex())?;
    Ok(ClassifyOutcome {
        rows,
        summary,
        final_checkpoint,
        run_dir,
        final_eval_acc,
        best_eval_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_parses_exactly_the_documented_names() {
        for name in AUGMENTOR_NAMES {
            parse_augmentor(name).unwrap();
        }
        assert!(parse_augmentor("mra+mixup").is_err());
        assert!(parse_augmentor("").is_err());
    }

    #[test]
    fn crop_flip_preserves_geometry_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::<f32>::from_pixels(Array3::from_shape_fn((32, 32, 3), |(y, x, _)| {
            ((y * 32 + x) % 256) as f32 / 255.0
        }));
        for _ in 0..20 {
            let out = crop_flip(&img, &mut rng);
            assert_eq!(out.height(), 32);
            assert_eq!(out.width(), 32);
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mixing_arms_emit_two_class_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let images: Vec<Image<f32>> = (0..4)
            .map(|i| Image::from_pixels(Array3::from_elem((8, 8, 3), i as f32 / 4.0)))
            .collect();
        let batch = ImageBatch::new(images, vec![0, 1, 0, 1], vec![0, 1, 2, 3]).unwrap();
        for arm in [AugmentorArm::Mixup, AugmentorArm::Cutmix] {
            let (imgs, labels, calls) = arm.apply(&batch, &mut rng).unwrap();
            assert_eq!(imgs.len(), 4);
            assert_eq!(calls, 0);
            assert!(labels.iter().all(|l| (0.0..=1.0).contains(&l.lam)));
        }
    }

    #[test]
    fn none_arm_is_identity_with_hard_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image::<f32>::from_pixels(Array3::from_elem((8, 8, 3), 0.3));
        let batch = ImageBatch::new(vec![img.clone()], vec![1], vec![0]).unwrap();
        let (imgs, labels, _) = AugmentorArm::None.apply(&batch, &mut rng).unwrap();
        assert_eq!(imgs[0], img);
        assert_eq!(labels[0].first, 1);
        assert_eq!(labels[0].second, 1);
    }

    #[test]
    fn mra_arms_require_a_checkpoint_path() {
        let mut cfg = TrainConfig::default();
        cfg.augmentor = "mra".into();
        let err = build_arm(&cfg).unwrap_err().to_string();
        assert!(err.contains("mae_checkpoint"), "{err}");
    }

    #[test]
    fn mixed_accuracy_weights_both_labels() {
        let logits =
            ndarray::Array2::from_shape_vec((1, 3), vec![5.0f32, 0.0, 0.0]).unwrap();
        let full = mixed_accuracy(&logits, &[MixedLabel::hard(0)]);
        assert_eq!(full, 1.0);
        let mixed = mixed_accuracy(&logits, &[MixedLabel::mixed(0, 2, 0.7)]);
        assert!((mixed - 0.7).abs() < 1e-6);
    }
}
