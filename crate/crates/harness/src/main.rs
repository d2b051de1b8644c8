//! `prunelab` — the pruning laboratory from the command line.
//!
//! Two ways to drive an experiment:
//!
//! - `report` (and `lottery`) run a whole protocol from one config and emit
//!   CSV + JSON report files in one shot.
//! - `train` → `prune` → `finetune` / `scratch` run the stages separately,
//!   passing checkpoints through the output directory. This is the path for
//!   poking at intermediate artifacts; the staged commands support the
//!   methods with a distinct large-model phase (`l1`, `slimming`,
//!   `magnitude`, plus `prune`/`scratch` for the uniform baselines).
//!
//! Every command takes `--config`, an optional `--seeds` override, and an
//! output directory. Failures print a single JSON object on stderr and exit
//! nonzero.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cost_model::{count_flops, count_flops_masked, count_params, finetune_budget, scratch_budget, ScratchArm, TrainBudget};
use harness::{
    analyze_kernel_pattern, evaluate, l1_keepset, load_checkpoint, load_dataset, run_lottery,
    run_param_efficiency, run_pipeline, save_checkpoint, schedule_string, weight_histogram,
    zero_masked, Arm, Checkpoint, DataBundle, ExperimentConfig, ExperimentReport, HarnessError,
    PruneMethod, ReportRow, Result, SparsityPattern, StageHistogram, TrainOptions, TrainSession,
};
use model_zoo::{build, ArchitectureSpec};
use pruning::{
    magnitude_mask, slimming_gammas, slimming_select, sparse_reinit, surgery, uniform_channel,
    uniform_sparsify, PruneMask,
};
use tensor_core::{init_network, Network};

// ---------------------------------------------------------------------------
// Argument surface

#[derive(Parser)]
#[command(name = "prunelab", version, about = "Train, prune, and retrain small CNNs on CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every experiment command.
#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the config's seed list (comma-separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Directory for checkpoints and reports.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Force the sequential reference path. This is already the only
    /// execution path; the flag is accepted for interface stability.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the large model for every seed and checkpoint it.
    Train(Common),
    /// Prune checkpoints (or build predefined targets) at every ratio.
    Prune(Common),
    /// Fine-tune pruned checkpoints under the fine-tuning budget.
    Finetune(Common),
    /// Train pruned architectures from scratch.
    Scratch {
        #[command(flatten)]
        common: Common,
        /// Budget arm: `e` (same epochs) or `b` (same FLOPs).
        #[arg(long, default_value = "e")]
        arm: String,
    },
    /// Run the winning-ticket grid and write its report files.
    Lottery(Common),
    /// Inspect a checkpoint: weight histograms, mask density and pattern.
    Analyze {
        /// Checkpoint to inspect.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Histogram bins per stage.
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Drop exact zeros before binning (pruned-weight view).
        #[arg(long)]
        exclude_zeros: bool,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full comparison protocol and write the report files.
    Report {
        #[command(flatten)]
        common: Common,
        /// Also run the parameter-efficiency sweep (slimming configs).
        #[arg(long)]
        param_efficiency: bool,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write the config's synthetic dataset as CIFAR-binary files.
    Gen {
        /// Experiment config (TOML) with a synthetic dataset section.
        #[arg(long, short)]
        config: PathBuf,
        /// Directory for the generated `.bin` files.
        #[arg(long, default_value = "runs/dataset")]
        out: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// Shared plumbing

/// Loads the config and applies the seed override.
fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seeds) = &common.seeds {
        config.seeds = seeds.clone();
        config.validate()?;
    }
    Ok(config)
}

/// Everything the staged commands share: config, spec, data, budget.
struct Stage {
    config: ExperimentConfig,
    spec: ArchitectureSpec,
    bundle: DataBundle,
    standard: TrainBudget,
    out: PathBuf,
}

impl Stage {
    fn new(common: &Common) -> Result<Self> {
        let config = load_config(common)?;
        let spec = config.model.to_spec()?;
        let (train_limit, test_limit) = config.dataset.limits();
        let bundle = load_dataset(&config.dataset.to_source()?, train_limit, test_limit)?;
        let standard = config.budget().standard_budget()?;
        std::fs::create_dir_all(&common.out)?;
        Ok(Stage { config, spec, bundle, standard, out: common.out.clone() })
    }

    fn opts(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.config.dataset.batch_size,
            momentum: self.config.train.momentum,
            weight_decay: self.config.train.weight_decay,
            ..TrainOptions::default()
        }
    }

    fn fresh(&self, spec: &ArchitectureSpec, seed: u64) -> Result<Network<f32>> {
        let mut net = build::<f32>(spec)?;
        init_network(&mut net, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(net)
    }

    fn eval(&self, net: &mut Network<f32>) -> Result<f64> {
        evaluate(net, &self.bundle.test, &self.bundle.norm, self.config.dataset.batch_size)
    }

    fn ckpt_path(&self, seed: u64, suffix: &str) -> PathBuf {
        self.out.join(format!("{}-seed{}-{}.ckpt", self.config.name, seed, suffix))
    }

    fn row(
        &self,
        experiment: &str,
        arm: Arm,
        seed: u64,
        accuracy: f64,
        flops: u64,
        params: u64,
        budget: &TrainBudget,
    ) -> Result<ReportRow> {
        Ok(ReportRow {
            experiment: experiment.into(),
            arm,
            seed,
            accuracy,
            flops,
            params,
            epochs: budget.epochs,
            lr_schedule: schedule_string(budget),
            config_hash: self.config.hash()?,
        })
    }
}

/// Writes row + summary CSVs and the JSON twin, then prints the summaries.
fn emit_report(report: &ExperimentReport, out: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    report.write_csv(&out.join(format!("{stem}.csv")))?;
    report.write_summary_csv(&out.join(format!("{stem}-summary.csv")))?;
    report.write_json(&out.join(format!("{stem}.json")))?;
    for s in &report.summaries {
        let spread = s.std.map_or(String::new(), |v| format!(" ± {v:.2}"));
        println!(
            "{:<28} {:<11} {:>6.2}{spread}  ({} seed{})",
            s.experiment,
            s.arm.as_str(),
            s.mean,
            s.seeds.len(),
            if s.seeds.len() == 1 { "" } else { "s" },
        );
    }
    for e in &report.errors {
        eprintln!("warning: {} seed {} failed: {}", e.experiment, e.seed, e.message);
    }
    if report.rows.is_empty() && !report.errors.is_empty() {
        return Err(HarnessError::Config("every seed failed; see warnings above".into()));
    }
    println!("report written to {}", out.join(format!("{stem}.csv")).display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Staged commands

fn cmd_train(common: &Common) -> Result<()> {
    let stage = Stage::new(common)?;
    let method = stage.config.method.method()?;
    let mut opts = stage.opts();
    match method {
        PruneMethod::L1 | PruneMethod::Magnitude => {}
        PruneMethod::Slimming => opts.slimming_lambda = Some(stage.config.method.lambda),
        _ => {
            return Err(HarnessError::Config(format!(
                "method {:?} has no separate large-model phase; use `report`",
                stage.config.method.kind
            )))
        }
    }
    for &seed in &stage.config.seeds {
        let net = stage.fresh(&stage.spec, seed)?;
        let mut session =
            TrainSession::new(net, stage.standard.clone(), &stage.bundle, seed, opts.clone())?;
        session.run()?;
        let (mut net, opt, rng) = session.into_parts();
        let accuracy = stage.eval(&mut net)?;
        let path = stage.ckpt_path(seed, "trained");
        let ckpt =
            Checkpoint::capture(&stage.spec.name, &net, Some(&opt), Some(&rng), None)?;
        save_checkpoint(&path, &ckpt)?;
        println!("seed {seed}: accuracy {accuracy:.2}% -> {}", path.display());
    }
    Ok(())
}

fn cmd_prune(common: &Common) -> Result<()> {
    let stage = Stage::new(common)?;
    let method = stage.config.method.method()?;
    for &seed in &stage.config.seeds {
        for &ratio in &stage.config.method.ratios {
            let (net, mask) = match method {
                PruneMethod::L1 | PruneMethod::Slimming => {
                    let trained = load_checkpoint(&stage.ckpt_path(seed, "trained"))?.network()?;
                    let keep = match method {
                        PruneMethod::L1 => l1_keepset(&trained, &stage.spec, ratio)?,
                        _ => slimming_select(&slimming_gammas(&trained, &stage.spec)?, ratio)?,
                    };
                    let (small, _) =
                        surgery(&trained, &keep, &format!("{}-pruned", stage.spec.name))?;
                    (small, None)
                }
                PruneMethod::Magnitude => {
                    let trained = load_checkpoint(&stage.ckpt_path(seed, "trained"))?.network()?;
                    let mask =
                        magnitude_mask(&trained, ratio, stage.config.method.magnitude_scope()?)?;
                    let mut net = trained;
                    net.set_steps(0);
                    net.clear_grads();
                    zero_masked(&mut net, &mask)?;
                    (net, Some(mask))
                }
                PruneMethod::UniformChannel => {
                    let spec = uniform_channel(&stage.spec, ratio)?;
                    (stage.fresh(&spec, seed)?, None)
                }
                PruneMethod::UniformSparsify => {
                    let mask = uniform_sparsify(&stage.spec, 1.0 - ratio, seed)?;
                    (sparse_reinit::<f32>(&stage.spec, &mask, seed)?, Some(mask))
                }
                PruneMethod::Sfp => {
                    return Err(HarnessError::Config(
                        "sfp prunes during training; use `report`".into(),
                    ))
                }
            };
            let spec = model_zoo::describe(&net, &format!("{}-pruned", stage.spec.name));
            let (flops, params) = pruned_cost(&spec, mask.as_ref())?;
            let path = stage.ckpt_path(seed, &format!("r{ratio}-pruned"));
            let ckpt = Checkpoint::capture(&spec.name, &net, None, None, mask.as_ref())?;
            save_checkpoint(&path, &ckpt)?;
            println!(
                "seed {seed} ratio {ratio}: {flops} FLOPs, {params} params -> {}",
                path.display()
            );
        }
    }
    Ok(())
}

/// Cost numbers for a pruned artifact: mask-scaled FLOPs when a mask is
/// present, plain spec costs otherwise.
fn pruned_cost(spec: &ArchitectureSpec, mask: Option<&PruneMask>) -> Result<(u64, u64)> {
    let flops = match mask {
        Some(m) => count_flops_masked(spec, &m.keep_fractions())?,
        None => count_flops(spec)?,
    };
    Ok((flops, count_params(spec)?))
}

fn cmd_finetune(common: &Common) -> Result<()> {
    let stage = Stage::new(common)?;
    let budget = finetune_budget(&stage.standard, stage.config.budget().finetune_epochs)?;
    let mut rows = Vec::new();
    for &seed in &stage.config.seeds {
        for &ratio in &stage.config.method.ratios {
            let ckpt = load_checkpoint(&stage.ckpt_path(seed, &format!("r{ratio}-pruned")))?;
            let mut net = ckpt.network()?;
            net.set_steps(0);
            let mask = ckpt.mask()?;
            let mut opts = stage.opts();
            opts.mask = mask.clone();
            let mut session =
                TrainSession::new(net, budget.clone(), &stage.bundle, seed, opts)?;
            session.run()?;
            let (mut net, _, _) = session.into_parts();
            let accuracy = stage.eval(&mut net)?;
            let spec = ckpt.spec();
            let (flops, params) = pruned_cost(spec, mask.as_ref())?;
            let path = stage.ckpt_path(seed, &format!("r{ratio}-finetuned"));
            let out = Checkpoint::capture(&spec.name, &net, None, None, mask.as_ref())?;
            save_checkpoint(&path, &out)?;
            println!("seed {seed} ratio {ratio}: accuracy {accuracy:.2}% -> {}", path.display());
            rows.push(stage.row(
                &format!("{}-r{ratio}", stage.config.name),
                Arm::FineTuned,
                seed,
                accuracy,
                flops,
                params,
                &budget,
            )?);
        }
    }
    let report = ExperimentReport::from_rows(rows, Vec::new(), stage.config.hash()?);
    report.write_csv(&stage.out.join("finetune.csv"))?;
    Ok(())
}

fn cmd_scratch(common: &Common, arm: &str) -> Result<()> {
    let stage = Stage::new(common)?;
    let (scratch_arm, report_arm) = match arm {
        "e" => (ScratchArm::E, Arm::ScratchE),
        "b" => (ScratchArm::B, Arm::ScratchB),
        other => {
            return Err(HarnessError::Config(format!("scratch arm must be e or b, got {other:?}")))
        }
    };
    let f_large = count_flops(&stage.spec)?;
    let policy = stage.config.budget().policy()?;
    let mut rows = Vec::new();
    for &seed in &stage.config.seeds {
        for &ratio in &stage.config.method.ratios {
            let ckpt = load_checkpoint(&stage.ckpt_path(seed, &format!("r{ratio}-pruned")))?;
            let spec = ckpt.spec().clone();
            let mask = ckpt.mask()?;
            let (flops, params) = pruned_cost(&spec, mask.as_ref())?;
            let budget = scratch_budget(&stage.standard, f_large, flops, policy, scratch_arm)?;
            let (net, opts) = match &mask {
                Some(m) => {
                    let mut o = stage.opts();
                    o.mask = Some(m.clone());
                    (sparse_reinit::<f32>(&spec, m, seed)?, o)
                }
                None => (stage.fresh(&spec, seed)?, stage.opts()),
            };
            let mut session = TrainSession::new(net, budget.clone(), &stage.bundle, seed, opts)?;
            session.run()?;
            let (mut net, _, _) = session.into_parts();
            let accuracy = stage.eval(&mut net)?;
            let path = stage.ckpt_path(seed, &format!("r{ratio}-scratch-{arm}"));
            let out = Checkpoint::capture(&spec.name, &net, None, None, mask.as_ref())?;
            save_checkpoint(&path, &out)?;
            println!(
                "seed {seed} ratio {ratio}: accuracy {accuracy:.2}% over {} epochs -> {}",
                budget.epochs,
                path.display()
            );
            rows.push(stage.row(
                &format!("{}-r{ratio}", stage.config.name),
                report_arm,
                seed,
                accuracy,
                flops,
                params,
                &budget,
            )?);
        }
    }
    let report = ExperimentReport::from_rows(rows, Vec::new(), stage.config.hash()?);
    report.write_csv(&stage.out.join(format!("scratch-{arm}.csv")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Whole-protocol commands

fn cmd_report(common: &Common, param_efficiency: bool) -> Result<()> {
    let config = load_config(common)?;
    let report =
        if param_efficiency { run_param_efficiency(&config)? } else { run_pipeline(&config)? };
    let stem = if param_efficiency { "param-efficiency" } else { "report" };
    emit_report(&report, &common.out, stem)
}

fn cmd_lottery(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let report = run_lottery(&config)?;
    emit_report(&report, &common.out, "lottery")
}

// ---------------------------------------------------------------------------
// Inspection and data commands

/// JSON shape of `analyze` output.
#[derive(Serialize)]
struct AnalysisOutput {
    model: String,
    steps: u64,
    histograms: Vec<StageHistogram>,
    mask_density: Option<f64>,
    kernel_pattern: Option<SparsityPattern>,
}

fn cmd_analyze(
    checkpoint: &Path,
    bins: usize,
    exclude_zeros: bool,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let net = ckpt.network()?;
    let spec = ckpt.spec();
    let histograms = weight_histogram(&net, spec, bins, exclude_zeros)?;
    let mask = ckpt.mask()?;
    // A mask over non-3x3 convs only has no kernel pattern; that is not an
    // error for inspection purposes.
    let kernel_pattern =
        mask.as_ref().and_then(|m| analyze_kernel_pattern(m, spec).ok());
    let output = AnalysisOutput {
        model: spec.name.clone(),
        steps: ckpt.steps(),
        histograms,
        mask_density: mask.as_ref().map(PruneMask::density),
        kernel_pattern,
    };
    let json = serde_json::to_string_pretty(&output)?;
    match out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_dataset_gen(config: &Path, out: &Path) -> Result<()> {
    let config = ExperimentConfig::load(config)?;
    if config.dataset.source != "synthetic" {
        return Err(HarnessError::Config(
            "`dataset gen` writes synthetic data; the config must use source = \"synthetic\"".into(),
        ));
    }
    let bundle = load_dataset(&config.dataset.to_source()?, None, None)?;
    std::fs::create_dir_all(out)?;
    let train_path = out.join("data_batch_1.bin");
    let test_path = out.join("test_batch.bin");
    harness::write_cifar_bin(&train_path, &bundle.train)?;
    harness::write_cifar_bin(&test_path, &bundle.test)?;
    println!(
        "wrote {} train / {} test samples to {}",
        bundle.train.len(),
        bundle.test.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train(common) => cmd_train(&common),
        Command::Prune(common) => cmd_prune(&common),
        Command::Finetune(common) => cmd_finetune(&common),
        Command::Scratch { common, arm } => cmd_scratch(&common, &arm),
        Command::Lottery(common) => cmd_lottery(&common),
        Command::Analyze { checkpoint, bins, exclude_zeros, out } => {
            cmd_analyze(&checkpoint, bins, exclude_zeros, out.as_deref())
        }
        Command::Report { common, param_efficiency } => cmd_report(&common, param_efficiency),
        Command::Dataset { command: DatasetCommand::Gen { config, out } } => {
            cmd_dataset_gen(&config, &out)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
        std::process::exit(1);
    }
}
