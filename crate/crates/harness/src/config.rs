//! Experiment configuration: a versioned TOML schema.
//!
//! A config names everything a run needs — model, dataset, pruning method,
//! budgets, seeds — and every derived object (spec, budget, lottery plan)
//! is constructed *from the parsed struct*, so the config hash identifies
//! the experiment independent of TOML formatting. Optional fields default
//! to the desk-scale conventions: 5 seeds, batch 64, an 8-epoch schedule
//! with decays at the half and three-quarter marks (the same shape as the
//! 160-epoch reference schedule with decays at 80 and 120).
//!
//! Validation is eager and total: a config that passes [`ExperimentConfig::
//! validate`] will not fail later for configuration reasons.

use serde::{Deserialize, Serialize};
use std::path::Path;

use cost_model::{BudgetLabel, BudgetPolicy, TrainBudget};
use lottery::{LotteryMode, LotteryPlan};
use model_zoo::{preresnet, vgg, vgg_with_widths, ArchitectureSpec, VggVariant};
use pruning::MagnitudeScope;

use crate::data::DatasetSource;
use crate::error::{HarnessError, Result};

// ---------------------------------------------------------------------------
// Sections

fn default_version() -> u32 {
    1
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn default_classes() -> usize {
    10
}
fn default_data_seed() -> u64 {
    7
}
fn default_batch() -> usize {
    64
}
fn default_ratios() -> Vec<f64> {
    vec![0.5]
}
fn default_lambda() -> f64 {
    1e-4
}
fn default_scope() -> String {
    "global".into()
}
fn default_epochs() -> usize {
    8
}
fn default_lr() -> f64 {
    0.1
}
fn default_decay() -> f64 {
    0.1
}
fn default_scratch() -> String {
    "proportional".into()
}
fn default_cap() -> f64 {
    2.0
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_lottery_mode() -> String {
    "one-shot".into()
}
fn default_rounds() -> usize {
    3
}
fn default_lrs() -> Vec<f64> {
    vec![0.1, 0.01]
}

/// Which network to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `vgg-mini`, `vgg16`, `vgg19`, or `preresnet-<depth>`.
    pub family: String,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Per-conv width override (VGG families only).
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
}

impl ModelConfig {
    /// Builds the architecture spec this config describes.
    pub fn to_spec(&self) -> Result<ArchitectureSpec> {
        let variant = match self.family.as_str() {
            "vgg-mini" => Some(VggVariant::VggMini),
            "vgg16" => Some(VggVariant::Vgg16),
            "vgg19" => Some(VggVariant::Vgg19),
            _ => None,
        };
        if let Some(v) = variant {
            return Ok(match &self.widths {
                Some(w) => vgg_with_widths(v, w, self.num_classes)?,
                None => vgg(v, self.num_classes),
            });
        }
        if let Some(depth) = self.family.strip_prefix("preresnet-") {
            if self.widths.is_some() {
                return Err(HarnessError::Config(
                    "width overrides apply to VGG families only".into(),
                ));
            }
            let depth: usize = depth
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad depth in {:?}", self.family)))?;
            return Ok(preresnet(depth, self.num_classes)?);
        }
        Err(HarnessError::Config(format!("unknown model family {:?}", self.family)))
    }
}

/// Where samples come from and how they are batched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// `synthetic` or `cifar-dir`.
    pub source: String,
    /// CIFAR-binary directory (`cifar-dir` only).
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Per-split caps; `synthetic` uses them as generation sizes
    /// (defaults 5000 / 1000).
    #[serde(default)]
    pub train_samples: Option<usize>,
    #[serde(default)]
    pub test_samples: Option<usize>,
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl DatasetConfig {
    pub fn to_source(&self) -> Result<DatasetSource> {
        match self.source.as_str() {
            "synthetic" => Ok(DatasetSource::Synthetic {
                classes: self.classes,
                train: self.train_samples.unwrap_or(5000),
                test: self.test_samples.unwrap_or(1000),
                seed: self.data_seed,
            }),
            "cifar-dir" => {
                let path = self.path.clone().ok_or_else(|| {
                    HarnessError::Config("cifar-dir source needs a path".into())
                })?;
                Ok(DatasetSource::CifarDir { path })
            }
            other => Err(HarnessError::Config(format!("unknown dataset source {other:?}"))),
        }
    }

    /// Split caps to apply after loading (on-disk sources only).
    pub fn limits(&self) -> (Option<usize>, Option<usize>) {
        if self.source == "synthetic" {
            (None, None) // generation already honors the sizes
        } else {
            (self.train_samples, self.test_samples)
        }
    }
}

/// Pruning method selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    /// `l1`, `slimming`, `magnitude`, `sfp`, `uniform-channel`,
    /// or `uniform-sparsify`.
    pub kind: String,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    /// Sparsity penalty coefficient (slimming).
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Magnitude pooling: `global` or `per-layer`.
    #[serde(default = "default_scope")]
    pub scope: String,
}

/// The pruning methods the pipeline knows how to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMethod {
    L1,
    Slimming,
    Magnitude,
    Sfp,
    UniformChannel,
    UniformSparsify,
}

impl MethodConfig {
    pub fn method(&self) -> Result<PruneMethod> {
        match self.kind.as_str() {
            "l1" => Ok(PruneMethod::L1),
            "slimming" => Ok(PruneMethod::Slimming),
            "magnitude" => Ok(PruneMethod::Magnitude),
            "sfp" => Ok(PruneMethod::Sfp),
            "uniform-channel" => Ok(PruneMethod::UniformChannel),
            "uniform-sparsify" => Ok(PruneMethod::UniformSparsify),
            other => Err(HarnessError::Config(format!("unknown method {other:?}"))),
        }
    }

    pub fn magnitude_scope(&self) -> Result<MagnitudeScope> {
        match self.scope.as_str() {
            "global" => Ok(MagnitudeScope::Global),
            "per-layer" => Ok(MagnitudeScope::PerLayer),
            other => Err(HarnessError::Config(format!("unknown magnitude scope {other:?}"))),
        }
    }
}

/// Epochs, learning-rate schedule, and scratch policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Decay epochs; omitted → half and three-quarter marks.
    #[serde(default)]
    pub milestones: Option<Vec<usize>>,
    #[serde(default = "default_decay")]
    pub decay: f64,
    /// `proportional` (epochs scale with the FLOPs ratio) or `capped`.
    #[serde(default = "default_scratch")]
    pub scratch: String,
    /// Stretch limit for the capped policy.
    #[serde(default = "default_cap")]
    pub cap: f64,
    /// Fine-tune length; omitted → a quarter of the standard epochs.
    #[serde(default)]
    pub finetune_epochs: Option<usize>,
}

impl BudgetConfig {
    /// The milestones in force: explicit, or `{epochs/2, 3·epochs/4}`.
    pub fn effective_milestones(&self) -> Vec<usize> {
        match &self.milestones {
            Some(ms) => ms.clone(),
            None => {
                let mut ms = vec![self.epochs / 2, 3 * self.epochs / 4];
                ms.dedup();
                ms.retain(|&m| m > 0 && m < self.epochs);
                ms
            }
        }
    }

    pub fn standard_budget(&self) -> Result<TrainBudget> {
        Ok(TrainBudget::new(
            self.epochs,
            self.lr,
            self.effective_milestones(),
            self.decay,
            BudgetLabel::Standard,
        )?)
    }

    pub fn policy(&self) -> Result<BudgetPolicy> {
        match self.scratch.as_str() {
            "proportional" => Ok(BudgetPolicy::Proportional),
            "capped" => Ok(BudgetPolicy::Capped { cap: self.cap }),
            other => Err(HarnessError::Config(format!("unknown scratch policy {other:?}"))),
        }
    }
}

/// Optimizer constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { momentum: default_momentum(), weight_decay: default_weight_decay() }
    }
}

/// Winning-ticket experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LotteryConfig {
    /// `one-shot` or `iterative`.
    #[serde(default = "default_lottery_mode")]
    pub mode: String,
    /// One-shot prune ratios; omitted → the reference grid.
    #[serde(default)]
    pub ratios: Option<Vec<f64>>,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_lrs")]
    pub lrs: Vec<f64>,
    /// Structured (filter-level) variant instead of weight-level.
    #[serde(default)]
    pub structured: bool,
}

impl LotteryConfig {
    pub fn to_plan(&self) -> Result<LotteryPlan> {
        let mode = match self.mode.as_str() {
            "one-shot" => LotteryMode::OneShot {
                ratios: self
                    .ratios
                    .clone()
                    .unwrap_or_else(|| vec![0.2, 0.4, 0.6, 0.8, 0.95]),
            },
            "iterative" => LotteryMode::Iterative { rounds: self.rounds },
            other => {
                return Err(HarnessError::Config(format!("unknown lottery mode {other:?}")))
            }
        };
        let plan = LotteryPlan { mode, lrs: self.lrs.clone(), structured: self.structured };
        plan.validate()?;
        Ok(plan)
    }
}

/// Optional guided studies layered on an automatic method.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidedConfig {
    /// Train the stage-mean architecture from scratch (Guided arm).
    #[serde(default)]
    pub architecture: bool,
}

// ---------------------------------------------------------------------------
// The top-level config

/// Everything one experiment needs, parsed from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub method: MethodConfig,
    #[serde(default)]
    pub budget: Option<BudgetConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub lottery: Option<LotteryConfig>,
    #[serde(default)]
    pub guided: GuidedConfig,
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The budget section with defaults applied.
    pub fn budget(&self) -> BudgetConfig {
        self.budget.clone().unwrap_or(BudgetConfig {
            epochs: default_epochs(),
            lr: default_lr(),
            milestones: None,
            decay: default_decay(),
            scratch: default_scratch(),
            cap: default_cap(),
            finetune_epochs: None,
        })
    }

    /// Checks every cross-field invariant eagerly.
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(HarnessError::Config(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        if self.name.is_empty() {
            return Err(HarnessError::Config("experiment name must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("need at least one seed".into()));
        }
        self.model.to_spec()?;
        let source = self.dataset.to_source()?;
        if let DatasetSource::CifarDir { path } = &source {
            if !Path::new(path).is_dir() {
                return Err(HarnessError::Config(format!(
                    "dataset directory {path:?} does not exist"
                )));
            }
        }
        if self.dataset.classes != self.model.num_classes {
            return Err(HarnessError::Config(format!(
                "dataset has {} classes but the model expects {}",
                self.dataset.classes, self.model.num_classes
            )));
        }
        if self.dataset.batch_size == 0 {
            return Err(HarnessError::Config("batch size must be ≥ 1".into()));
        }
        self.method.method()?;
        self.method.magnitude_scope()?;
        if self.method.ratios.is_empty() {
            return Err(HarnessError::Config("need at least one prune ratio".into()));
        }
        for &r in &self.method.ratios {
            if !(0.0..1.0).contains(&r) || !r.is_finite() {
                return Err(HarnessError::Config(format!("ratio {r} outside [0, 1)")));
            }
        }
        if self.method.lambda < 0.0 || !self.method.lambda.is_finite() {
            return Err(HarnessError::Config(format!(
                "lambda must be non-negative, got {}",
                self.method.lambda
            )));
        }
        let budget = self.budget();
        budget.standard_budget()?;
        budget.policy()?;
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(HarnessError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.train.momentum
            )));
        }
        if self.train.weight_decay < 0.0 {
            return Err(HarnessError::Config("weight decay must be non-negative".into()));
        }
        if let Some(lot) = &self.lottery {
            lot.to_plan()?;
        }
        Ok(())
    }

    /// Identity of this experiment (independent of TOML formatting).
    pub fn hash(&self) -> Result<String> {
        crate::report::config_hash(self)
    }
}

// ---------------------------------------------------------------------------
