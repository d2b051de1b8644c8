//! Experiment grids for lottery runs.
//!
//! A plan is the cross product of sparsity levels, initial learning rates
//! and init arms (ticket vs random re-init); the harness walks it and trains
//! one job per cell. Keeping the expansion here makes the grid arithmetic
//! (one-shot ratios vs `1 - 0.8^i` iterative levels) unit-testable without
//! any training.

use serde::{Deserialize, Serialize};

use crate::error::{LotteryError, Result};

/// How sparsity levels are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LotteryMode {
    /// Prune each ratio directly from the trained dense model.
    OneShot { ratios: Vec<f64> },
    /// Prune 20% of survivors per round, retraining between rounds.
    Iterative { rounds: usize },
}

/// Full grid: mode x learning rates, plus the structured variant toggle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LotteryPlan {
    pub mode: LotteryMode,
    pub lrs: Vec<f64>,
    /// Also run L1-filter keep-sets with ticket vs random init.
    pub structured: bool,
}

impl LotteryPlan {
    /// The conventional grid: one-shot {20,40,60,80,95}% at lr 0.1 and 0.01.
    pub fn default_grid() -> Self {
        LotteryPlan {
            mode: LotteryMode::OneShot { ratios: vec![0.2, 0.4, 0.6, 0.8, 0.95] },
            lrs: vec![0.1, 0.01],
            structured: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.mode {
            LotteryMode::OneShot { ratios } => {
                if ratios.is_empty() {
                    return Err(LotteryError::InvalidArg("one-shot needs ratios".into()));
                }
                for &r in ratios {
                    if !(0.0..1.0).contains(&r) {
                        return Err(LotteryError::InvalidArg(format!(
                            "prune ratio must be in [0,1), got {r}"
                        )));
                    }
                }
            }
            LotteryMode::Iterative { rounds } => {
                if *rounds == 0 {
                    return Err(LotteryError::InvalidArg("iterative needs >= 1 round".into()));
                }
            }
        }
        if self.lrs.is_empty() || self.lrs.iter().any(|&lr| !(lr > 0.0)) {
            return Err(LotteryError::InvalidArg("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Target prune fractions, one per sparsity level in run order.
    pub fn sparsity_levels(&self) -> Vec<f64> {
        match &self.mode {
            LotteryMode::OneShot { ratios } => ratios.clone(),
            LotteryMode::Iterative { rounds } => {
                (1..=*rounds).map(|i| 1.0 - 0.8f64.powi(i as i32)).collect()
            }
        }
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_mirrors_the_conventional_ratios() {
        let plan = LotteryPlan::default_grid();
        plan.validate().unwrap();
        assert_eq!(plan.sparsity_levels(), vec![0.2, 0.4, 0.6, 0.8, 0.95]);
        assert_eq!(plan.lrs, vec![0.1, 0.01]);
    }

    #[test]
    fn iterative_levels_follow_the_point_eight_power_law() {
        let plan = LotteryPlan {
            mode: LotteryMode::Iterative { rounds: 3 },
            lrs: vec![0.1],
            structured: false,
        };
        let levels = plan.sparsity_levels();
        assert_eq!(levels.len(), 3);
        assert!((levels[0] - 0.2).abs() < 1e-12);
        assert!((levels[1] - 0.36).abs() < 1e-12);
        assert!((levels[2] - 0.488).abs() < 1e-12);
    }

    #[test]
    fn malformed_plans_are_rejected() {
        let mut plan = LotteryPlan::default_grid();
        plan.lrs.clear();
        assert!(plan.validate().is_err());

        let plan = LotteryPlan {
            mode: LotteryMode::OneShot { ratios: vec![1.0] },
            lrs: vec![0.1],
            structured: false,
        };
        assert!(plan.validate().is_err());

        let plan = LotteryPlan {
            mode: LotteryMode::Iterative { rounds: 0 },
            lrs: vec![0.1],
            structured: false,
        };
        assert!(plan.validate().is_err());
    }
}
