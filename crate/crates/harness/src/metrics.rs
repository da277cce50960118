//! Per-epoch metrics: CSV rows plus a JSON run summary.
//!
//! CSV columns are fixed: `epoch,train_loss,train_acc,eval_acc,seconds`.
//! Accuracy cells are empty for pretraining runs, where they do not apply.
//! The `seconds` column is wall clock and is the one column exempt from the
//! bit-identical reproducibility contract.

use mra_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str = "epoch,train_loss,train_acc,eval_acc,seconds";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub eval_acc: Option<f64>,
    pub seconds: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            cell(r.train_acc),
            cell(r.eval_acc),
            r.seconds
        ));
    }
    out
}

/// Drops the wall-clock column, keeping every semantic cell; used when
/// comparing runs for bit-identity.
pub fn strip_seconds(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(i) => &line[..i],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn validate_rows(rows: &[EpochRow]) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r.epoch != i + 1 {
            return Err(Error::validation(format!(
                "epochs must be contiguous from 1, row {i} says {}",
                r.epoch
            )));
        }
        for acc in [r.train_acc, r.eval_acc].into_iter().flatten() {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::validation(format!("accuracy {acc} outside [0, 1]")));
            }
        }
    }
    Ok(())
}

/// End-of-run record written as `summary.json`. Option fields appear per task.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: String,
    pub config_sha256: String,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_eval_acc: Option<f64>,
    pub best_eval_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub eval_loss_per_epoch: Option<Vec<f64>>,
    pub param_sha256: String,
    pub augmentor_sha256_before: Option<String>,
    pub augmentor_sha256_after: Option<String>,
    pub augment_calls: Option<u64>,
    pub checkpoint: Option<String>,
}
