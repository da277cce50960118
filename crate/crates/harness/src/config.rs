//! Run configuration: a JSON document with every default materialized, so a
//! saved copy re-runs to the same result. Unknown keys are rejected.

use mra_core::attmask::ScoreMode;
use mra_core::mae::MaeConfig;
use mra_core::nn::OptimizerKind;
use mra_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pretrain,
    Classify,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Linear warmup over the leading fraction of steps, cosine decay after.
    Cosine { warmup_frac: f64 },
    /// Multiply by `factor` when training passes each fraction of the epochs.
    Step { decay_at: Vec<f64>, factor: f64 },
}

impl Schedule {
    /// Step decay at 1/3 and 2/3 of the run.
    pub fn step_thirds() -> Self {
        Schedule::Step { decay_at: vec![1.0 / 3.0, 2.0 / 3.0], factor: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Constant => Ok(()),
            Schedule::Cosine { warmup_frac } => {
                if !(0.0..1.0).contains(warmup_frac) {
                    return Err(Error::validation(format!(
                        "warmup fraction {warmup_frac} outside [0, 1)"
                    )));
                }
                Ok(())
            }
            Schedule::Step { decay_at, factor } => {
                if decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
                    return Err(Error::validation("decay points must lie in [0, 1]"));
                }
                if !(*factor > 0.0 && *factor <= 1.0) {
                    return Err(Error::validation(format!("decay factor {factor} outside (0, 1]")));
                }
                Ok(())
            }
        }
    }

    /// Learning rate for the upcoming step. `step_frac` is global step /
    /// total steps, `epoch_frac` is epoch / total epochs; both in [0, 1).
    pub fn lr(&self, base: f64, step_frac: f64, epoch_frac: f64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine { warmup_frac } => {
                if step_frac < *warmup_frac {
                    base * (step_frac / warmup_frac).max(0.0)
                } else {
                    let p = if *warmup_frac < 1.0 {
                        (step_frac - warmup_frac) / (1.0 - warmup_frac)
                    } else {
                        1.0
                    };
                    0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
            Schedule::Step { decay_at, factor } => {
                let passed = decay_at.iter().filter(|&&f| epoch_frac >= f).count() as i32;
                base * factor.powi(passed)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub task: Task,
    pub dataset: String,
    /// Autoencoder preset for pretraining ("desk", "tiny", "desk_small",
    /// "desk_wide"); classifier preset for classification ("small_resnet").
    pub model: String,
    pub augmentor: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub seed: u64,
    pub out_dir: String,
    /// Pretraining objective ratio; also the augmentation-time default.
    pub mask_ratio: f64,
    /// Augmentation-time override; falls back to `mask_ratio`.
    pub aug_mask_ratio: Option<f64>,
    pub strategy: String,
    pub score_mode: ScoreMode,
    pub apply_probability: f64,
    /// Pretrained autoencoder for the mra augmentor arms.
    pub mae_checkpoint: Option<String>,
    /// Save a checkpoint every this many epochs; 0 = final only.
    pub checkpoint_every: usize,
    pub train_limit: Option<usize>,
    pub eval_limit: Option<usize>,
    pub eval_batch: usize,
    /// Random crop (4px zero padding) and horizontal flip before augmentation.
    pub crop_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema_version: SCHEMA_VERSION,
            task: Task::Classify,
            dataset: "synthetic:shapes".into(),
            model: "small_resnet".into(),
            augmentor: "none".into(),
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            weight_decay: 5e-4,
            optimizer: OptimizerKind::sgd(0.9),
            schedule: Schedule::step_thirds(),
            seed: 0,
            out_dir: "runs/run".into(),
            mask_ratio: 0.4,
            aug_mask_ratio: None,
            strategy: "mask_low".into(),
            score_mode: ScoreMode::Raw,
            apply_probability: 1.0,
            mae_checkpoint: None,
            checkpoint_every: 0,
            train_limit: None,
            eval_limit: None,
            eval_batch: 64,
            crop_flip: true,
        }
    }
}

impl TrainConfig {
    /// Autoencoder pretraining defaults: cosine schedule with warmup, decoupled
    /// weight decay.
    pub fn default_pretrain() -> Self {
        TrainConfig {
            task: Task::Pretrain,
            dataset: "synthetic:gradients".into(),
            model: "desk".into(),
            epochs: 20,
            batch_size: 16,
            lr: 1.5e-3,
            weight_decay: 0.05,
            optimizer: OptimizerKind::adamw(),
            schedule: Schedule::Cosine { warmup_frac: 0.1 },
            out_dir: "runs/pretrain".into(),
            crop_flip: false,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "config schema version {} but this build reads {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::validation("epochs, batch_size, eval_batch must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::validation(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if let Some(r) = self.aug_mask_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::validation(format!("aug mask ratio {r} outside [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::validation(format!(
                "apply probability {} outside [0, 1]",
                self.apply_probability
            )));
        }
        self.schedule.validate()?;
        match self.task {
            Task::Pretrain => {
                mae_preset(&self.model)?;
            }
            Task::Classify => {
                if self.model != "small_resnet" {
                    return Err(Error::validation(format!(
                        "unknown classifier preset {:?}; have small_resnet",
                        self.model
                    )));
                }
                crate::classify::parse_augmentor(&self.augmentor)?;
            }
        }
        Ok(())
    }

    pub fn effective_aug_ratio(&self) -> f64 {
        self.aug_mask_ratio.unwrap_or(self.mask_ratio)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("reading {}: {e}", path.display())))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical JSON with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash_hex(&self) -> String {
        crate::manifest::sha256_hex(self.to_json().as_bytes())
    }
}

/// Autoencoder presets for 32x32 inputs plus the 8x8 gradient-check size.
/// The `_small`/`_wide` variants scale capacity for the model-size sweep.
pub fn mae_preset(name: &str) -> Result<MaeConfig> {
    let mut cfg = MaeConfig::desk();
    match name {
        "desk" => {}
        "tiny" => cfg = MaeConfig::tiny(),
        "desk_small" => {
            cfg.embed_dim = 64;
            cfg.encoder_layers = 2;
            cfg.decoder_embed_dim = 32;
            cfg.decoder_layers = 1;
        }
        "desk_wide" => {
            cfg.embed_dim = 192;
            cfg.encoder_layers = 6;
            cfg.decoder_embed_dim = 96;
            cfg.decoder_layers = 2;
        }
        other => {
            return Err(Error::validation(format!(
                "unknown autoencoder preset {other:?}; have desk, desk_small, desk_wide, tiny"
            )))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        for cfg in [TrainConfig::default(), TrainConfig::default_pretrain()] {
            cfg.validate().unwrap();
            let back: TrainConfig = serde_json::from_str(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"task":"classify","typo_key":1}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("typo_key"), "{err}");
    }

    #[test]
    fn partial_documents_get_defaults() {
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"task":"pretrain","model":"tiny","epochs":2}"#).unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.mask_ratio, 0.4);
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash_hex(), b.hash_hex());
        b.seed = 1;
        assert_ne!(a.hash_hex(), b.hash_hex());
    }

    #[test]
    fn cosine_schedule_warms_up_then_decays_to_zero() {
        let s = Schedule::Cosine { warmup_frac: 0.1 };
        assert!(s.lr(1.0, 0.0, 0.0) == 0.0);
        assert!((s.lr(1.0, 0.05, 0.0) - 0.5).abs() < 1e-12);
        assert!((s.lr(1.0, 0.1, 0.0) - 1.0).abs() < 1e-12);
        assert!((s.lr(1.0, 0.55, 0.0) - 0.5).abs() < 1e-12);
        assert!(s.lr(1.0, 0.9999, 0.0) < 1e-6);
    }

    #[test]
    fn step_schedule_decays_at_thirds() {
        let s = Schedule::step_thirds();
        assert_eq!(s.lr(1.0, 0.0, 0.0), 1.0);
        assert!((s.lr(1.0, 0.0, 0.34) - 0.1).abs() < 1e-12);
        assert!((s.lr(1.0, 0.0, 0.67) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut cfg = TrainConfig::default();
        cfg.apply_probability = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.mask_ratio = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default_pretrain();
        cfg.model = "resnet50".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn presets_cover_the_size_sweep() {
        for name in ["tiny", "desk", "desk_small", "desk_wide"] {
            mae_preset(name).unwrap();
        }
        assert!(mae_preset("huge").is_err());
    }
}
