//! Autoencoder pretraining: random masking, reconstruction objective,
//! checkpoint cadence, deterministic resume.

use crate::checkpoint::{dump_params, load_params, Checkpoint, RngPos};
use crate::config::{mae_preset, Task, TrainConfig};
use crate::dataset::{load_dataset, Dataset};
use crate::manifest::{atomic_write, write_manifest};
use crate::metrics::{to_csv, EpochRow, RunSummary};
use mra_core::augment::derive_seed;
use mra_core::mae::{pretrain_step, sample_random_mask, MaskedAutoencoderParams};
use mra_core::nn::params::param_hash_hex;
use mra_core::nn::Optimizer;
use mra_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Seed streams, kept apart so adding draws to one never shifts another.
const MASK_STREAM: u64 = 0x6D61_736B;
const SHUFFLE_STREAM: u64 = 0x7368_7566;
const EVAL_STREAM: u64 = 0x6576_616C;

pub struct PretrainOutcome {
    pub rows: Vec<EpochRow>,
    /// Every optimizer step's batch loss, in order, across the whole run.
    pub step_losses: Vec<f64>,
    pub summary: RunSummary,
    pub final_checkpoint: PathBuf,
    pub run_dir: PathBuf,
}

/// Deterministic epoch order: Fisher-Yates under a per-epoch seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM + epoch as u64));
    idx.shuffle(&mut rng);
    idx
}

fn build_checkpoint(
    params: &MaskedAutoencoderParams<f32>,
    opt: &Optimizer<f32>,
    mask_rng: &ChaCha8Rng,
    step: u64,
    epoch: u64,
) -> Checkpoint {
    Checkpoint::build(
        "mae",
        serde_json::to_value(&params.config).expect("mae config serializes"),
        step,
        epoch,
        dump_params(params),
        Some(opt.export_state()),
        Some(RngPos::capture(mask_rng)),
    )
}

/// Mean reconstruction loss over the eval split under per-image fixed masks.
fn eval_loss(
    params: &MaskedAutoencoderParams<f32>,
    dataset: &Dataset,
    seed: u64,
) -> Result<f64> {
    let geom = params.config.geometry();
    let ratio = params.config.mask_ratio;
    let mut total = 0.0f64;
    for (img, id) in dataset.eval.images.iter().zip(&dataset.eval.ids) {
        let keep = sample_random_mask(&geom, ratio, derive_seed(seed ^ EVAL_STREAM, *id))?;
        let cache = params.forward_masked(img, &keep, false)?;
        total += params.reconstruction_loss(&cache)? as f64;
    }
    Ok(total / dataset.eval.len().max(1) as f64)
}

pub fn run_pretraining(cfg: &TrainConfig, resume: Option<&Path>) -> Result<PretrainOutcome> {
    if cfg.task != Task::Pretrain {
        return Err(Error::validation("config task is not pretrain"));
    }
    cfg.validate()?;
    let run_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| Error::state(format!("creating {}: {e}", run_dir.display())))?;
    atomic_write(&run_dir.join("config.json"), cfg.to_json().as_bytes())?;

    let dataset = load_dataset(&cfg.dataset)?.limited(cfg.train_limit, cfg.eval_limit);
    if dataset.train.is_empty() {
        return Err(Error::validation("train split is empty"));
    }
    let mut mae_cfg = mae_preset(&cfg.model)?;
    mae_cfg.mask_ratio = cfg.mask_ratio;
    if dataset.image_side() != mae_cfg.image_size || dataset.channels() != mae_cfg.channels {
        return Err(Error::geometry(format!(
            "dataset images are {}x{} with {} channels; preset {} expects {}x{} with {}",
            dataset.image_side(),
            dataset.image_side(),
            dataset.channels(),
            cfg.model,
            mae_cfg.image_size,
            mae_cfg.image_size,
            mae_cfg.channels
        )));
    }

    let mut params = MaskedAutoencoderParams::<f32>::init(mae_cfg.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, MASK_STREAM));
    let mut start_epoch = 0usize;
    let mut global_step = 0u64;

    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        ckpt.expect_kind("mae")?;
        let stored: mra_core::mae::MaeConfig = ckpt.config_as()?;
        if stored != mae_cfg {
            return Err(Error::state(format!(
                "checkpoint architecture differs from config preset {}",
                cfg.model
            )));
        }
        load_params(&mut params, &ckpt.tensor_map()?)?;
        let dump = ckpt
            .header
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::state("checkpoint has no optimizer state to resume from"))?;
        opt = Optimizer::import_state(dump);
        let pos = ckpt
            .header
            .rng
            .as_ref()
            .ok_or_else(|| Error::state("checkpoint has no rng state to resume from"))?;
        mask_rng = pos.restore();
        start_epoch = ckpt.header.epoch as usize;
        global_step = ckpt.header.step;
        if start_epoch >= cfg.epochs {
            return Err(Error::validation(format!(
                "checkpoint already covers {} epochs, config asks for {}",
                start_epoch, cfg.epochs
            )));
        }
    }

    let steps_per_epoch = dataset.train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut rows = Vec::new();
    let mut step_losses = Vec::new();
    let mut eval_losses = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let t0 = Instant::now();
        let order = epoch_order(dataset.train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cfg.schedule.lr(
                cfg.lr,
                global_step as f64 / total_steps.max(1) as f64,
                epoch as f64 / cfg.epochs as f64,
            );
            opt.set_lr(lr);
            let batch = dataset.train.select(chunk);
            let loss = pretrain_step(&mut params, &mut opt, &batch, &mut mask_rng)? as f64;
            step_losses.push(loss);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            global_step += 1;
        }
        let train_loss = loss_sum / seen as f64;
        let ev = eval_loss(&params, &dataset, cfg.seed)?;
        eval_losses.push(ev);
        rows.push(EpochRow {
            epoch: epoch + 1 - start_epoch,
            train_loss,
            train_acc: None,
            eval_acc: None,
            seconds: t0.elapsed().as_secs_f64(),
        });
        println!(
            "epoch {}/{} train_loss {train_loss:.6} eval_loss {ev:.6} ({:.1}s)",
            epoch + 1,
            cfg.epochs,
            t0.elapsed().as_secs_f64()
        );

        let ckpt = build_checkpoint(&params, &opt, &mask_rng, global_step, (epoch + 1) as u64);
        ckpt.save(&run_dir.join("last.ckpt"))?;
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            ckpt.save(&run_dir.join(format!("ckpt_epoch_{}.ckpt", epoch + 1)))?;
        }
    }

    let final_checkpoint = run_dir.join("final.ckpt");
    build_checkpoint(&params, &opt, &mask_rng, global_step, cfg.epochs as u64)
        .save(&final_checkpoint)?;

    let summary = RunSummary {
        task: "pretrain".into(),
        config_sha256: cfg.hash_hex(),
        epochs: cfg.epochs,
        final_train_loss: rows.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
        eval_loss_per_epoch: Some(eval_losses),
        param_sha256: param_hash_hex(&params),
        checkpoint: Some("final.ckpt".into()),
        ..RunSummary::default()
    };
    atomic_write(&run_dir.join("metrics.csv"), to_csv(&rows).as_bytes())?;
    atomic_write(
        &run_dir.join("summary.json"),
        serde_json::to_vec_pretty(&summary).expect("summary serializes").as_slice(),
    )?;
    write_manifest(&run_dir, &cfg.hash_hex())?;
    Ok(PretrainOutcome { rows, step_losses, summary, final_checkpoint, run_dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(dir: &Path, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            model: "desk_small".into(),
            dataset: "synthetic:gradients:48:16".into(),
            batch_size: 16,
            lr: 1e-3,
            checkpoint_every: 1,
            out_dir: dir.to_string_lossy().into_owned(),
            ..TrainConfig::default_pretrain()
        }
    }

    #[test]
    fn interrupted_run_resumes_bit_exactly() {
        let base = tempfile::tempdir().unwrap();
        let full_dir = base.path().join("full");
        let full = run_pretraining(&tiny_cfg(&full_dir, 2), None).unwrap();

        // Same config, picked up from the end-of-epoch-1 checkpoint the full
        // run left behind; only the output directory moves.
        let resumed_cfg = tiny_cfg(&base.path().join("resumed"), 2);
        let resumed =
            run_pretraining(&resumed_cfg, Some(&full_dir.join("ckpt_epoch_1.ckpt"))).unwrap();

        // The resumed epoch reproduces the uninterrupted run's second epoch,
        // first step onward, bit for bit.
        let steps_per_epoch = full.step_losses.len() / 2;
        assert_eq!(resumed.step_losses.len(), steps_per_epoch);
        assert_eq!(
            full.step_losses[steps_per_epoch..]
                .iter()
                .map(|l| l.to_bits())
                .collect::<Vec<_>>(),
            resumed.step_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let base = tempfile::tempdir().unwrap();
        let a = run_pretraining(&tiny_cfg(&base.path().join("a"), 1), None).unwrap();
        let b = run_pretraining(&tiny_cfg(&base.path().join("b"), 1), None).unwrap();
        assert_eq!(
            a.step_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
            b.step_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
        );
        let ca = std::fs::read(&a.final_checkpoint).unwrap();
        let cb = std::fs::read(&b.final_checkpoint).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn shuffles_differ_across_epochs_but_not_runs() {
        let a = epoch_order(100, 7, 0);
        let b = epoch_order(100, 7, 1);
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(100, 7, 0));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn wrong_task_is_rejected() {
        let cfg = TrainConfig::default();
        assert!(run_pretraining(&cfg, None).is_err());
    }
}
