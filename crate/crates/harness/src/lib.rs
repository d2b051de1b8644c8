//! Experiment orchestration for the pruning laboratory.
//!
//! This crate turns the lower layers (engine, zoo, cost model, pruning,
//! lottery) into runnable experiments: dataset ingestion and augmentation,
//! the budgeted training loop, checkpoint IO, sparsity/architecture
//! analysis, and report emission, all behind the `prunelab` CLI.
//!
//! The organizing principle is the three-stage pipeline — train a large
//! model, prune it, fine-tune the survivor — compared against training the
//! pruned architecture from scratch under equal-epoch and equal-FLOPs
//! budgets. Every run is deterministic given its config and seed: reports
//! are reproducible bit-for-bit on the reference path.

pub mod analyze;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use analyze::{
    analyze_channel_pattern, analyze_kernel_pattern, extract_stage_widths, guided_architecture,
    guided_sparsity, weight_histogram, LayerWidthStat, SparsityPattern, StageHistogram,
    StagePattern, StageWidthSummary,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, MAGIC, VERSION};
pub use config::{
    BudgetConfig, DatasetConfig, ExperimentConfig, GuidedConfig, LotteryConfig, MethodConfig,
    ModelConfig, PruneMethod, TrainConfig,
};
pub use data::{
    assemble_batch, load_dataset, read_cifar_bin, synthetic_dataset, write_cifar_bin, Batch,
    DataBundle, DatasetSource, Normalizer, RawDataset,
};
pub use error::{HarnessError, Result};
pub use pipeline::{
    l1_keepset, match_uniform_ratio, run_lottery, run_param_efficiency, run_pipeline, zero_masked,
};
pub use report::{
    config_hash, fnv1a, schedule_string, Arm, ArmSummary, ExperimentReport, ReportRow, RunError,
};
pub use trainer::{
    augmentation_rng, evaluate, EpochReport, StepReport, TrainOptions, TrainSession,
};
