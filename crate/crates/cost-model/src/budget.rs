//! Training-budget calculus for the retraining comparisons.
//!
//! Two ways of giving a pruned model a "fair" training run from scratch:
//!
//! - **Scratch-E** keeps the original epoch count — equal *epochs*;
//! - **Scratch-B** keeps the original compute — equal *budget*. The pruned
//!   model costs fewer FLOPs per pass, so its epoch count grows by
//!   `F_large / F_pruned`, with the learning-rate milestones stretched by the
//!   same factor. A capped policy limits the stretch (large-scale runs
//!   commonly just double the epochs rather than follow the full ratio).
//!
//! Fine-tuning after pruning conventionally runs a quarter of the original
//! epochs at the final (fully decayed) learning rate.
//!
//! Epoch arithmetic rounds half-up; scaled milestones are clamped below the
//! new epoch count so schedules stay well-formed.

use serde::{Deserialize, Serialize};

use crate::error::{CostError, Result};

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Which regime a budget belongs to; carried through to report rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetLabel {
    Standard,
    ScratchE,
    ScratchB,
    Finetune,
}

impl BudgetLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            BudgetLabel::Standard => "standard",
            BudgetLabel::ScratchE => "scratch-e",
            BudgetLabel::ScratchB => "scratch-b",
            BudgetLabel::Finetune => "finetune",
        }
    }
}

/// An epoch count plus a step learning-rate schedule.
///
/// The schedule starts at `lr` and multiplies by `decay` at each milestone:
/// epoch `e` (0-based) runs at `lr * decay^k` where `k` counts milestones
/// `m <= e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub label: BudgetLabel,
}

impl TrainBudget {
    pub fn new(
        epochs: usize,
        lr: f64,
        milestones: Vec<usize>,
        decay: f64,
        label: BudgetLabel,
    ) -> Result<Self> {
        let budget = TrainBudget { epochs, lr, milestones, decay, label };
        budget.validate()?;
        Ok(budget)
    }

    /// Check the schedule invariants; call after deserializing from config.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(CostError::BadBudget(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.decay > 0.0) || !self.decay.is_finite() {
            return Err(CostError::BadBudget(format!("decay must be positive, got {}", self.decay)));
        }
        for pair in self.milestones.windows(2) {
            if pair[1] <= pair[0] {
                return Err(CostError::BadBudget(format!(
                    "milestones must be strictly increasing, got {:?}",
                    self.milestones
                )));
            }
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return Err(CostError::BadBudget(format!(
                    "milestone {last} not below epoch count {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    /// Learning rate in force during a given 0-based epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(decays as i32)
    }

    /// Learning rate after every scheduled decay has fired.
    pub fn final_lr(&self) -> f64 {
        self.lr * self.decay.powi(self.milestones.len() as i32)
    }
}

/// How far Scratch-B may stretch the epoch count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BudgetPolicy {
    /// Stretch by the full FLOP ratio.
    Proportional,
    /// Stretch by the ratio, but never beyond `cap` times the base epochs.
    Capped { cap: f64 },
}

impl BudgetPolicy {
    /// The conventional cap of 2x.
    pub fn capped() -> Self {
        BudgetPolicy::Capped { cap: 2.0 }
    }
}

/// Which fairness convention a scratch run follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScratchArm {
    /// Equal epochs.
    E,
    /// Equal compute budget.
    B,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Round to nearest integer, halves up. The epsilon absorbs float error in
/// products like `epochs · (f_large / f_pruned)`, so a value that denotes an
/// exact half (e.g. 3.5 arriving as 3.4999999999999996) still rounds up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

fn scale_milestones(milestones: &[usize], factor: f64, epochs: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(milestones.len());
    for &m in milestones {
        let mut s = round_half_up(m as f64 * factor);
        // Clamp below the epoch count; collisions can only appear in the
        // degenerate shrinking case (factor < 1), where we drop duplicates.
        if epochs == 0 {
            continue;
        }
        s = s.min(epochs - 1);
        if out.last().is_some_and(|&last| s <= last) {
            continue;
        }
        out.push(s);
    }
    out
}

/// Derive the from-scratch training budget for a pruned model.
///
/// `f_large`/`f_pruned` are per-example forward FLOPs of the unpruned and
/// pruned models. The base budget must be the standard (large-model) one.
pub fn scratch_budget(
    base: &TrainBudget,
    f_large: u64,
    f_pruned: u64,
    policy: BudgetPolicy,
    arm: ScratchArm,
) -> Result<TrainBudget> {
    base.validate()?;
    if base.label != BudgetLabel::Standard {
        return Err(CostError::BadBudget(format!(
            "scratch budgets derive from a standard budget, got {}",
            base.label.as_str()
        )));
    }
    if f_large == 0 || f_pruned == 0 {
        return Err(CostError::InvalidArg(format!(
            "FLOP counts must be positive, got large={f_large} pruned={f_pruned}"
        )));
    }
    match arm {
        ScratchArm::E => Ok(TrainBudget { label: BudgetLabel::ScratchE, ..base.clone() }),
        ScratchArm::B => {
            let ratio = f_large as f64 / f_pruned as f64;
            let factor = match policy {
                BudgetPolicy::Proportional => ratio,
                BudgetPolicy::Capped { cap } => {
                    if !(cap >= 1.0) || !cap.is_finite() {
                        return Err(CostError::BadBudget(format!("cap must be >= 1, got {cap}")));
                    }
                    ratio.min(cap)
                }
            };
            let epochs = round_half_up(base.epochs as f64 * factor);
            let milestones = scale_milestones(&base.milestones, factor, epochs);
            TrainBudget::new(epochs, base.lr, milestones, base.decay, BudgetLabel::ScratchB)
        }
    }
}

/// Derive the fine-tuning budget from the standard one: a quarter of the
/// epochs (overridable) at the final decayed learning rate, no milestones.
pub fn finetune_budget(base: &TrainBudget, epochs_override: Option<usize>) -> Result<TrainBudget> {
    base.validate()?;
    if base.label != BudgetLabel::Standard {
        return Err(CostError::BadBudget(format!(
            "fine-tune budgets derive from a standard budget, got {}",
            base.label.as_str()
        )));
    }
    let epochs = epochs_override.unwrap_or_else(|| round_half_up(base.epochs as f64 / 4.0));
    TrainBudget::new(epochs, base.final_lr(), Vec::new(), base.decay, BudgetLabel::Finetune)
}

// ---------------------------------------------------------------------------
