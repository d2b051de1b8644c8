//! Report rows, seed aggregation, and emission.
//!
//! Every trained-and-evaluated model becomes one [`ReportRow`]; rows are
//! grouped by (experiment, arm) and aggregated into mean ± sample standard
//! deviation over seeds (std is absent below two seeds). Arms come from a
//! closed set so downstream tooling can rely on the labels.
//!
//! Reports are emitted twice: a flat CSV of rows (plot-ready, fixed column
//! order) and a JSON twin carrying rows, summaries, and any per-seed errors.
//! The config hash ties every row to the exact configuration that produced
//! it — FNV-1a over the config's canonical JSON, cheap and dependency-free.

use serde::{Deserialize, Serialize};
use std::path::Path;

use cost_model::TrainBudget;

use crate::error::Result;

// ---------------------------------------------------------------------------
// Arms

/// The closed set of comparison arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "unpruned")]
    Unpruned,
    #[serde(rename = "finetuned")]
    FineTuned,
    #[serde(rename = "scratch-e")]
    ScratchE,
    #[serde(rename = "scratch-b")]
    ScratchB,
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "guided")]
    Guided,
    #[serde(rename = "transferred")]
    Transferred,
    #[serde(rename = "ticket")]
    Ticket,
    #[serde(rename = "random-init")]
    RandomInit,
}

impl Arm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::Unpruned => "unpruned",
            Arm::FineTuned => "finetuned",
            Arm::ScratchE => "scratch-e",
            Arm::ScratchB => "scratch-b",
            Arm::Uniform => "uniform",
            Arm::Guided => "guided",
            Arm::Transferred => "transferred",
            Arm::Ticket => "ticket",
            Arm::RandomInit => "random-init",
        }
    }

    /// Every arm, in report order.
    pub fn all() -> [Arm; 9] {
        [
            Arm::Unpruned,
            Arm::FineTuned,
            Arm::ScratchE,
            Arm::ScratchB,
            Arm::Uniform,
            Arm::Guided,
            Arm::Transferred,
            Arm::Ticket,
            Arm::RandomInit,
        ]
    }
}

// ---------------------------------------------------------------------------
// Rows and summaries

/// One (experiment, arm, seed) result. Accuracy is top-1 percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub arm: Arm,
    pub seed: u64,
    pub accuracy: f64,
    pub flops: u64,
    pub params: u64,
    pub epochs: usize,
    pub lr_schedule: String,
    pub config_hash: String,
}

/// Mean ± std over the seeds of one (experiment, arm) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub experiment: String,
    pub arm: Arm,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample (n−1) standard deviation; absent below two seeds.
    pub std: Option<f64>,
    /// Mean cost over seeds (pruned specs may differ per seed).
    pub flops: f64,
    pub params: f64,
}

/// A failure recorded instead of a row; other seeds keep running.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunError {
    pub experiment: String,
    pub seed: u64,
    pub message: String,
}

/// The complete output of an orchestrated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<ArmSummary>,
    pub errors: Vec<RunError>,
}

impl ExperimentReport {
    /// Groups rows by (experiment, arm) in first-appearance order and
    /// aggregates each group over its seeds.
    pub fn from_rows(rows: Vec<ReportRow>, errors: Vec<RunError>, config_hash: String) -> Self {
        let mut order: Vec<(String, Arm)> = Vec::new();
        for r in &rows {
            let key = (r.experiment.clone(), r.arm);
            if !order.contains(&key) {
                order.push(key);
            }
        }
        let summaries = order
            .into_iter()
            .map(|(experiment, arm)| {
                let group: Vec<&ReportRow> =
                    rows.iter().filter(|r| r.experiment == experiment && r.arm == arm).collect();
                let n = group.len() as f64;
                let accuracies: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
                let mean = accuracies.iter().sum::<f64>() / n;
                let std = (group.len() >= 2).then(|| {
                    let ss = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>();
                    (ss / (n - 1.0)).sqrt()
                });
                ArmSummary {
                    experiment,
                    arm,
                    seeds: group.iter().map(|r| r.seed).collect(),
                    accuracies,
                    mean,
                    std,
                    flops: group.iter().map(|r| r.flops as f64).sum::<f64>() / n,
                    params: group.iter().map(|r| r.params as f64).sum::<f64>() / n,
                }
            })
            .collect();
        ExperimentReport { config_hash, rows, summaries, errors }
    }

    /// The row CSV: `experiment, arm, seed, accuracy, flops, params, epochs,
    /// lr_schedule, config_hash`.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "experiment",
            "arm",
            "seed",
            "accuracy",
            "flops",
            "params",
            "epochs",
            "lr_schedule",
            "config_hash",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.experiment.as_str(),
                r.arm.as_str(),
                &r.seed.to_string(),
                &r.accuracy.to_string(),
                &r.flops.to_string(),
                &r.params.to_string(),
                &r.epochs.to_string(),
                r.lr_schedule.as_str(),
                r.config_hash.as_str(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Per-group summary CSV (mean ± std curves).
    pub fn summary_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["experiment", "arm", "seeds", "mean", "std", "flops", "params"])?;
        for s in &self.summaries {
            w.write_record([
                s.experiment.as_str(),
                s.arm.as_str(),
                &s.seeds.len().to_string(),
                &s.mean.to_string(),
                &s.std.map_or(String::new(), |v| v.to_string()),
                &s.flops.to_string(),
                &s.params.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.summary_csv_string()?)?;
        Ok(())
    }

    /// Machine-readable twin with rows, summaries, and errors.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Helpers

/// Human-readable schedule column: `lr` alone, or `lr xdecay @ m1/m2`.
pub fn schedule_string(budget: &TrainBudget) -> String {
    if budget.milestones.is_empty() {
        format!("{}", budget.lr)
    } else {
        let ms: Vec<String> = budget.milestones.iter().map(|m| m.to_string()).collect();
        format!("{} x{} @ {}", budget.lr, budget.decay, ms.join("/"))
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hex hash of a config's canonical JSON form.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(format!("{:016x}", fnv1a(&json)))
}

// ---------------------------------------------------------------------------
