//! Experiment orchestration: train, prune, and retrain, arm by arm.
//!
//! The pipeline owns the protocol glue — which budget each arm trains under,
//! which derived seed feeds which phase, and which cost numbers go on each
//! report row. Method semantics:
//!
//! - `l1` / `slimming`: train the large model once per seed, select channels
//!   (per-layer L1 norms / globally pooled BN scales), carve the keep set
//!   with surgery, then run the inherit-and-finetune arm against Scratch-E
//!   and Scratch-B rebuilds of the carved architecture.
//! - `magnitude`: unstructured. The fine-tune arm keeps the surviving
//!   trained weights under the mask; the scratch arms re-initialize with the
//!   sparse He rule and train under the same mask. FLOPs are mask-scaled;
//!   parameter counts stay at the dense architecture (zeros still occupy
//!   storage).
//! - `sfp`: soft filter pruning zeroes the smallest filters at every epoch
//!   end of the large run, so the finished model is already pruned; the
//!   zeroed filters are carved off and the result reports as the fine-tuned
//!   arm with no extra tuning phase.
//! - `uniform-channel` / `uniform-sparsify`: predefined-target baselines —
//!   no large training, one from-scratch run per ratio under the standard
//!   budget, reported as the uniform arm.
//!
//! Every phase that initializes, shuffles, or samples derives its seed as
//! `seed ^ salt·φ64` with a phase-specific salt, so arms never share random
//! draws. A failure aborts the seed that hit it — the seed contributes no
//! rows, one recorded error — and the remaining seeds keep running.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cost_model::{
    count_flops, count_flops_masked, count_params, finetune_budget, scratch_budget, BudgetLabel,
    BudgetPolicy, ScratchArm, TrainBudget,
};
use lottery::{lottery_prune_iteration, reset_to_ticket, snapshot_init, LotteryMode, LotteryPlan, TicketState};
use model_zoo::{build, ArchitectureSpec};
use pruning::{
    l1_filter_select, magnitude_mask, slimming_gammas, slimming_select, sparse_reinit, surgery,
    uniform_channel, uniform_sparsify, ChannelKeepSet, MagnitudeScope, PruneMask, SfpConfig,
};
use tensor_core::{init_network, Network, ParamName};

use crate::analyze::{extract_stage_widths, guided_architecture};
use crate::config::{ExperimentConfig, PruneMethod};
use crate::data::{load_dataset, DataBundle};
use crate::error::{HarnessError, Result};
use crate::report::{schedule_string, Arm, ExperimentReport, ReportRow, RunError};
use crate::trainer::{evaluate, TrainOptions, TrainSession};

// ---------------------------------------------------------------------------
// Derived seeds

// Phase salts; composed with ratio/level indices they keep every randomized
// phase of one run seed on its own stream.
const SALT_FINETUNE: u64 = 0x100;
const SALT_SCRATCH_E: u64 = 0x200;
const SALT_SCRATCH_B: u64 = 0x300;
const SALT_UNIFORM: u64 = 0x400;
const SALT_GUIDED: u64 = 0x500;
const SALT_MASK: u64 = 0x600;
const SALT_TICKET: u64 = 0x700;
const SALT_RANDOM: u64 = 0x800;

/// Decorrelates a phase's RNG stream from the run seed.
fn phase_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Salt for one cell of a (learning-rate × level) grid.
fn cell_salt(base: u64, lr_index: u64, level: u64) -> u64 {
    base + (lr_index << 4) + level
}

// ---------------------------------------------------------------------------
// Shared helpers

/// Per-layer L1 keep set over the prunable convs.
pub fn l1_keepset(
    net: &Network<f32>,
    spec: &ArchitectureSpec,
    ratio: f64,
) -> Result<ChannelKeepSet> {
    let mut keep = ChannelKeepSet::new();
    for conv in spec.prunable_convs() {
        let weight = net.param(conv, ParamName::Weight).expect("conv weight");
        keep.insert(conv, l1_filter_select(weight, ratio)?);
    }
    Ok(keep)
}

/// Zeroes the masked-out weight positions in place, so a run starts inside
/// the mask (the masked step keeps it there).
pub fn zero_masked(net: &mut Network<f32>, mask: &PruneMask) -> Result<()> {
    mask.validate_against(net)?;
    for (&i, m) in mask.layers() {
        let data = net.param_mut(i, ParamName::Weight).unwrap().data_mut();
        for p in 0..m.len() {
            if !m.get(p) {
                data[p] = 0.0;
            }
        }
    }
    Ok(())
}

/// The uniform channel ratio whose parameter count lands closest to
/// `target`.
///
/// Parameters are non-increasing in the ratio, so a bisection brackets the
/// step that straddles the target and the closer side is globally optimal.
/// Ties prefer the smaller ratio (the larger model).
pub fn match_uniform_ratio(
    spec: &ArchitectureSpec,
    target: u64,
) -> Result<(f64, ArchitectureSpec)> {
    let params_at =
        |r: f64| -> Result<u64> { Ok(count_params(&uniform_channel(spec, r)?)?) };
    let (mut lo, mut hi) = (0.0_f64, 1.0 - 1e-9);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if params_at(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (p_lo, p_hi) = (params_at(lo)?, params_at(hi)?);
    let ratio = if p_lo.abs_diff(target) <= p_hi.abs_diff(target) { lo } else { hi };
    let matched = uniform_channel(spec, ratio)?;
    Ok((ratio, matched))
}

// ---------------------------------------------------------------------------
// The runner

/// One experiment's shared state: config, dataset, spec, budgets, and the
/// large model's cost numbers.
struct Runner {
    config: ExperimentConfig,
    spec: ArchitectureSpec,
    bundle: DataBundle,
    standard: TrainBudget,
    policy: BudgetPolicy,
    hash: String,
    f_large: u64,
    p_large: u64,
}

impl Runner {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.model.to_spec()?;
        let (train_limit, test_limit) = config.dataset.limits();
        let bundle = load_dataset(&config.dataset.to_source()?, train_limit, test_limit)?;
        let budget = config.budget();
        Ok(Runner {
            spec: spec.clone(),
            bundle,
            standard: budget.standard_budget()?,
            policy: budget.policy()?,
            hash: config.hash()?,
            f_large: count_flops(&spec)?,
            p_large: count_params(&spec)?,
            config: config.clone(),
        })
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

    /// Trains `net` through `budget` and evaluates on the test split.
    fn train_eval(
        &self,
        net: Network<f32>,
        budget: &TrainBudget,
        seed: u64,
        opts: TrainOptions,
    ) -> Result<(Network<f32>, f64)> {
        let mut session = TrainSession::new(net, budget.clone(), &self.bundle, seed, opts)?;
        session.run()?;
        let (mut net, _, _) = session.into_parts();
        let accuracy = self.eval(&mut net)?;
        Ok((net, accuracy))
    }

    fn eval(&self, net: &mut Network<f32>) -> Result<f64> {
        evaluate(net, &self.bundle.test, &self.bundle.norm, self.config.dataset.batch_size)
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
    ) -> ReportRow {
        ReportRow {
            experiment: experiment.into(),
            arm,
            seed,
            accuracy,
            flops,
            params,
            epochs: budget.epochs,
            lr_schedule: schedule_string(budget),
            config_hash: self.hash.clone(),
        }
    }

    fn ratio_label(&self, ratio: f64) -> String {
        format!("{}-r{}", self.config.name, ratio)
    }

    /// Scratch-E and Scratch-B rows for a carved architecture.
    fn scratch_arms(
        &self,
        experiment: &str,
        seed: u64,
        ri: u64,
        small_spec: &ArchitectureSpec,
        f_small: u64,
        p_small: u64,
    ) -> Result<Vec<ReportRow>> {
        let mut rows = Vec::new();
        for (arm, scratch_arm, salt) in [
            (Arm::ScratchE, ScratchArm::E, SALT_SCRATCH_E),
            (Arm::ScratchB, ScratchArm::B, SALT_SCRATCH_B),
        ] {
            let budget =
                scratch_budget(&self.standard, self.f_large, f_small, self.policy, scratch_arm)?;
            let s = phase_seed(seed, salt + ri);
            let (_, accuracy) = self.train_eval(self.fresh(small_spec, s)?, &budget, s, self.opts())?;
            rows.push(self.row(experiment, arm, seed, accuracy, f_small, p_small, &budget));
        }
        Ok(rows)
    }

    /// Scratch arms for an unstructured mask: sparse re-init, masked steps.
    fn masked_scratch_arms(
        &self,
        experiment: &str,
        seed: u64,
        ri: u64,
        mask: &PruneMask,
        f_masked: u64,
    ) -> Result<Vec<ReportRow>> {
        let mut rows = Vec::new();
        for (arm, scratch_arm, salt) in [
            (Arm::ScratchE, ScratchArm::E, SALT_SCRATCH_E),
            (Arm::ScratchB, ScratchArm::B, SALT_SCRATCH_B),
        ] {
            let budget =
                scratch_budget(&self.standard, self.f_large, f_masked, self.policy, scratch_arm)?;
            let s = phase_seed(seed, salt + ri);
            let net = sparse_reinit::<f32>(&self.spec, mask, s)?;
            let mut opts = self.opts();
            opts.mask = Some(mask.clone());
            let (_, accuracy) = self.train_eval(net, &budget, s, opts)?;
            rows.push(self.row(experiment, arm, seed, accuracy, f_masked, self.p_large, &budget));
        }
        Ok(rows)
    }

    /// All arms of one seed. Returns the rows plus the channel keep-sets the
    /// structured methods produced (per ratio index), for the guided phase.
    fn run_seed(&self, seed: u64) -> Result<(Vec<ReportRow>, Vec<(usize, ChannelKeepSet)>)> {
        let method = self.config.method.method()?;
        let budget_cfg = self.config.budget();
        let ratios = &self.config.method.ratios;
        let mut rows = Vec::new();
        let mut keeps = Vec::new();
        match method {
            PruneMethod::L1 | PruneMethod::Slimming | PruneMethod::Magnitude => {
                let mut opts = self.opts();
                if method == PruneMethod::Slimming {
                    opts.slimming_lambda = Some(self.config.method.lambda);
                }
                let (big, acc_big) =
                    self.train_eval(self.fresh(&self.spec, seed)?, &self.standard, seed, opts)?;
                rows.push(self.row(
                    &self.config.name,
                    Arm::Unpruned,
                    seed,
                    acc_big,
                    self.f_large,
                    self.p_large,
                    &self.standard,
                ));
                for (ri, &ratio) in ratios.iter().enumerate() {
                    let experiment = self.ratio_label(ratio);
                    let salt_ri = ri as u64;
                    if method == PruneMethod::Magnitude {
                        let mask =
                            magnitude_mask(&big, ratio, self.config.method.magnitude_scope()?)?;
                        let f_masked = count_flops_masked(&self.spec, &mask.keep_fractions())?;
                        let ft = finetune_budget(&self.standard, budget_cfg.finetune_epochs)?;
                        let mut inherited = big.clone();
                        inherited.set_steps(0);
                        inherited.clear_grads();
                        zero_masked(&mut inherited, &mask)?;
                        let s = phase_seed(seed, SALT_FINETUNE + salt_ri);
                        let mut opts = self.opts();
                        opts.mask = Some(mask.clone());
                        let (_, accuracy) = self.train_eval(inherited, &ft, s, opts)?;
                        rows.push(self.row(
                            &experiment,
                            Arm::FineTuned,
                            seed,
                            accuracy,
                            f_masked,
                            self.p_large,
                            &ft,
                        ));
                        rows.extend(
                            self.masked_scratch_arms(&experiment, seed, salt_ri, &mask, f_masked)?,
                        );
                    } else {
                        let keep = match method {
                            PruneMethod::L1 => l1_keepset(&big, &self.spec, ratio)?,
                            _ => slimming_select(&slimming_gammas(&big, &self.spec)?, ratio)?,
                        };
                        let (small, small_spec) =
                            surgery(&big, &keep, &format!("{}-pruned", self.spec.name))?;
                        let f_small = count_flops(&small_spec)?;
                        let p_small = count_params(&small_spec)?;
                        let ft = finetune_budget(&self.standard, budget_cfg.finetune_epochs)?;
                        let s = phase_seed(seed, SALT_FINETUNE + salt_ri);
                        let (_, accuracy) = self.train_eval(small, &ft, s, self.opts())?;
                        rows.push(self.row(
                            &experiment,
                            Arm::FineTuned,
                            seed,
                            accuracy,
                            f_small,
                            p_small,
                            &ft,
                        ));
                        rows.extend(self.scratch_arms(
                            &experiment,
                            seed,
                            salt_ri,
                            &small_spec,
                            f_small,
                            p_small,
                        )?);
                        keeps.push((ri, keep));
                    }
                }
            }
            PruneMethod::Sfp => {
                for (ri, &ratio) in ratios.iter().enumerate() {
                    let experiment = self.ratio_label(ratio);
                    let salt_ri = ri as u64;
                    let mut opts = self.opts();
                    opts.sfp = Some(SfpConfig::new(ratio)?);
                    let (big, _) =
                        self.train_eval(self.fresh(&self.spec, seed)?, &self.standard, seed, opts)?;
                    // The zeroed filters have the smallest norms by
                    // construction; the L1 keep set carves exactly them.
                    let keep = l1_keepset(&big, &self.spec, ratio)?;
                    let (mut small, small_spec) =
                        surgery(&big, &keep, &format!("{}-pruned", self.spec.name))?;
                    let f_small = count_flops(&small_spec)?;
                    let p_small = count_params(&small_spec)?;
                    let accuracy = self.eval(&mut small)?;
                    rows.push(self.row(
                        &experiment,
                        Arm::FineTuned,
                        seed,
                        accuracy,
                        f_small,
                        p_small,
                        &self.standard,
                    ));
                    rows.extend(self.scratch_arms(
                        &experiment,
                        seed,
                        salt_ri,
                        &small_spec,
                        f_small,
                        p_small,
                    )?);
                    keeps.push((ri, keep));
                }
            }
            PruneMethod::UniformChannel => {
                for (ri, &ratio) in ratios.iter().enumerate() {
                    let experiment = self.ratio_label(ratio);
                    let small_spec = uniform_channel(&self.spec, ratio)?;
                    let f_small = count_flops(&small_spec)?;
                    let p_small = count_params(&small_spec)?;
                    let s = phase_seed(seed, SALT_UNIFORM + ri as u64);
                    let (_, accuracy) =
                        self.train_eval(self.fresh(&small_spec, s)?, &self.standard, s, self.opts())?;
                    rows.push(self.row(
                        &experiment,
                        Arm::Uniform,
                        seed,
                        accuracy,
                        f_small,
                        p_small,
                        &self.standard,
                    ));
                }
            }
            PruneMethod::UniformSparsify => {
                for (ri, &ratio) in ratios.iter().enumerate() {
                    let experiment = self.ratio_label(ratio);
                    let salt_ri = ri as u64;
                    let mask = uniform_sparsify(
                        &self.spec,
                        1.0 - ratio,
                        phase_seed(seed, SALT_MASK + salt_ri),
                    )?;
                    let f_masked = count_flops_masked(&self.spec, &mask.keep_fractions())?;
                    let s = phase_seed(seed, SALT_UNIFORM + salt_ri);
                    let net = sparse_reinit::<f32>(&self.spec, &mask, s)?;
                    let mut opts = self.opts();
                    opts.mask = Some(mask);
                    let (_, accuracy) = self.train_eval(net, &self.standard, s, opts)?;
                    rows.push(self.row(
                        &experiment,
                        Arm::Uniform,
                        seed,
                        accuracy,
                        f_masked,
                        self.p_large,
                        &self.standard,
                    ));
                }
            }
        }
        Ok((rows, keeps))
    }

    /// The guided arm: pool every seed's keep-set per ratio into stage
    /// means, build that architecture, and train it from scratch per seed.
    /// Extraction failures are recorded under seed 0 (they are not
    /// seed-specific).
    fn run_guided(
        &self,
        keeps: &BTreeMap<usize, Vec<ChannelKeepSet>>,
        rows: &mut Vec<ReportRow>,
        errors: &mut Vec<RunError>,
    ) {
        for (&ri, sets) in keeps {
            let ratio = self.config.method.ratios[ri];
            let experiment = self.ratio_label(ratio);
            let derived = extract_stage_widths(sets, &self.spec)
                .and_then(|summary| guided_architecture(&summary, &self.spec))
                .and_then(|guided| {
                    let f = count_flops(&guided)?;
                    let p = count_params(&guided)?;
                    Ok((guided, f, p))
                });
            let (guided, f_guided, p_guided) = match derived {
                Ok(g) => g,
                Err(e) => {
                    errors.push(RunError {
                        experiment: experiment.clone(),
                        seed: 0,
                        message: format!("guided architecture: {e}"),
                    });
                    continue;
                }
            };
            for &seed in &self.config.seeds {
                let s = phase_seed(seed, SALT_GUIDED + ri as u64);
                let trained = self
                    .fresh(&guided, s)
                    .and_then(|net| self.train_eval(net, &self.standard, s, self.opts()));
                match trained {
                    Ok((_, accuracy)) => rows.push(self.row(
                        &experiment,
                        Arm::Guided,
                        seed,
                        accuracy,
                        f_guided,
                        p_guided,
                        &self.standard,
                    )),
                    Err(e) => errors.push(RunError {
                        experiment: experiment.clone(),
                        seed,
                        message: e.to_string(),
                    }),
                }
            }
        }
    }

    /// One (seed, learning-rate) cell of a lottery grid.
    fn run_lottery_cell(
        &self,
        seed: u64,
        lr: f64,
        li: u64,
        plan: &LotteryPlan,
    ) -> Result<Vec<ReportRow>> {
        let budget = TrainBudget::new(
            self.standard.epochs,
            lr,
            self.standard.milestones.clone(),
            self.standard.decay,
            BudgetLabel::Standard,
        )?;
        let prefix = format!("{}-lr{}", self.config.name, lr);
        let theta0 = self.fresh(&self.spec, seed)?;
        let mut rows = Vec::new();
        match &plan.mode {
            LotteryMode::OneShot { ratios } => {
                let snapshot = snapshot_init(&theta0)?;
                let (dense, _) = self.train_eval(theta0.clone(), &budget, seed, self.opts())?;
                for (level, &ratio) in ratios.iter().enumerate() {
                    let level = level as u64;
                    let experiment = format!("{prefix}-r{ratio}");
                    if plan.structured {
                        // Structured ticket: the winning filters carved out
                        // of the untrained model, retrained in full.
                        let keep = l1_keepset(&dense, &self.spec, ratio)?;
                        let (ticket_net, small_spec) =
                            surgery(&theta0, &keep, &format!("{}-ticket", self.spec.name))?;
                        let f_small = count_flops(&small_spec)?;
                        let p_small = count_params(&small_spec)?;
                        let s = phase_seed(seed, cell_salt(SALT_TICKET, li, level));
                        let (_, acc) = self.train_eval(ticket_net, &budget, s, self.opts())?;
                        rows.push(self.row(&experiment, Arm::Ticket, seed, acc, f_small, p_small, &budget));
                        let s = phase_seed(seed, cell_salt(SALT_RANDOM, li, level));
                        let (_, acc) =
                            self.train_eval(self.fresh(&small_spec, s)?, &budget, s, self.opts())?;
                        rows.push(self.row(&experiment, Arm::RandomInit, seed, acc, f_small, p_small, &budget));
                    } else {
                        let mask = magnitude_mask(&dense, ratio, MagnitudeScope::Global)?;
                        let f_masked = count_flops_masked(&self.spec, &mask.keep_fractions())?;
                        let mut ticket_net = dense.clone();
                        reset_to_ticket(&mut ticket_net, &snapshot, &mask)?;
                        let s = phase_seed(seed, cell_salt(SALT_TICKET, li, level));
                        let mut opts = self.opts();
                        opts.mask = Some(mask.clone());
                        let (_, acc) = self.train_eval(ticket_net, &budget, s, opts)?;
                        rows.push(self.row(&experiment, Arm::Ticket, seed, acc, f_masked, self.p_large, &budget));
                        // The random arm never sees the snapshot: a fresh
                        // draw under the same mask.
                        let s = phase_seed(seed, cell_salt(SALT_RANDOM, li, level));
                        let mut random_net = self.fresh(&self.spec, s)?;
                        zero_masked(&mut random_net, &mask)?;
                        let mut opts = self.opts();
                        opts.mask = Some(mask);
                        let (_, acc) = self.train_eval(random_net, &budget, s, opts)?;
                        rows.push(self.row(&experiment, Arm::RandomInit, seed, acc, f_masked, self.p_large, &budget));
                    }
                }
            }
            LotteryMode::Iterative { rounds } => {
                let mut state = TicketState::new(&theta0)?;
                let (mut trained, _) = self.train_eval(theta0, &budget, seed, self.opts())?;
                for round in 1..=*rounds {
                    let level = round as u64;
                    lottery_prune_iteration(&trained, &mut state)?;
                    let experiment = format!("{prefix}-i{round}");
                    let f_masked = count_flops_masked(&self.spec, &state.mask.keep_fractions())?;
                    let mut ticket_net = trained.clone();
                    reset_to_ticket(&mut ticket_net, &state.theta0, &state.mask)?;
                    let s = phase_seed(seed, cell_salt(SALT_TICKET, li, level));
                    let mut opts = self.opts();
                    opts.mask = Some(state.mask.clone());
                    let (ticket_trained, acc) = self.train_eval(ticket_net, &budget, s, opts)?;
                    rows.push(self.row(&experiment, Arm::Ticket, seed, acc, f_masked, self.p_large, &budget));
                    let s = phase_seed(seed, cell_salt(SALT_RANDOM, li, level));
                    let mut random_net = self.fresh(&self.spec, s)?;
                    zero_masked(&mut random_net, &state.mask)?;
                    let mut opts = self.opts();
                    opts.mask = Some(state.mask.clone());
                    let (_, acc) = self.train_eval(random_net, &budget, s, opts)?;
                    rows.push(self.row(&experiment, Arm::RandomInit, seed, acc, f_masked, self.p_large, &budget));
                    // The next round prunes the retrained ticket.
                    trained = ticket_trained;
                }
            }
        }
        Ok(rows)
    }

    /// One seed of the parameter-efficiency sweep.
    fn run_efficiency_seed(&self, seed: u64) -> Result<Vec<ReportRow>> {
        let mut opts = self.opts();
        opts.slimming_lambda = Some(self.config.method.lambda);
        let (big, _) =
            self.train_eval(self.fresh(&self.spec, seed)?, &self.standard, seed, opts)?;
        let gammas = slimming_gammas(&big, &self.spec)?;
        let mut rows = Vec::new();
        for (ri, &ratio) in self.config.method.ratios.iter().enumerate() {
            let experiment = self.ratio_label(ratio);
            let salt_ri = ri as u64;
            let keep = slimming_select(&gammas, ratio)?;
            let (_, slim_spec) = surgery(&big, &keep, &format!("{}-slim", self.spec.name))?;
            let f_slim = count_flops(&slim_spec)?;
            let p_slim = count_params(&slim_spec)?;
            let s = phase_seed(seed, SALT_SCRATCH_E + salt_ri);
            let (_, acc) = self.train_eval(self.fresh(&slim_spec, s)?, &self.standard, s, self.opts())?;
            rows.push(self.row(&experiment, Arm::ScratchE, seed, acc, f_slim, p_slim, &self.standard));
            let (_, matched_spec) = match_uniform_ratio(&self.spec, p_slim)?;
            let f_u = count_flops(&matched_spec)?;
            let p_u = count_params(&matched_spec)?;
            let s = phase_seed(seed, SALT_UNIFORM + salt_ri);
            let (_, acc) =
                self.train_eval(self.fresh(&matched_spec, s)?, &self.standard, s, self.opts())?;
            rows.push(self.row(&experiment, Arm::Uniform, seed, acc, f_u, p_u, &self.standard));
        }
        Ok(rows)
    }
}

// ---------------------------------------------------------------------------
// Entry points

/// The full comparison protocol for `config`: every seed, every ratio,
/// every arm its method supports.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let runner = Runner::new(config)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut keeps: BTreeMap<usize, Vec<ChannelKeepSet>> = BTreeMap::new();
    for &seed in &runner.config.seeds {
        match runner.run_seed(seed) {
            Ok((mut seed_rows, seed_keeps)) => {
                rows.append(&mut seed_rows);
                for (ri, keep) in seed_keeps {
                    keeps.entry(ri).or_default().push(keep);
                }
            }
            Err(e) => errors.push(RunError {
                experiment: runner.config.name.clone(),
                seed,
                message: e.to_string(),
            }),
        }
    }
    if runner.config.guided.architecture {
        runner.run_guided(&keeps, &mut rows, &mut errors);
    }
    Ok(ExperimentReport::from_rows(rows, errors, runner.hash.clone()))
}

/// Winning-ticket grid: ticket vs random re-init across sparsity levels and
/// learning rates.
pub fn run_lottery(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let runner = Runner::new(config)?;
    let plan = runner
        .config
        .lottery
        .as_ref()
        .ok_or_else(|| HarnessError::Config("lottery runs need a [lottery] section".into()))?
        .to_plan()?;
    if plan.structured && matches!(plan.mode, LotteryMode::Iterative { .. }) {
        return Err(HarnessError::Config(
            "the structured lottery variant is one-shot only".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for &seed in &runner.config.seeds {
        for (li, &lr) in plan.lrs.iter().enumerate() {
            match runner.run_lottery_cell(seed, lr, li as u64, &plan) {
                Ok(mut cell_rows) => rows.append(&mut cell_rows),
                Err(e) => errors.push(RunError {
                    experiment: format!("{}-lr{}", runner.config.name, lr),
                    seed,
                    message: e.to_string(),
                }),
            }
        }
    }
    Ok(ExperimentReport::from_rows(rows, errors, runner.hash.clone()))
}

/// Architecture-search view: slimming-derived architectures against
/// uniformly slimmed ones at matched parameter budgets, all trained from
/// scratch under the standard budget.
pub fn run_param_efficiency(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let runner = Runner::new(config)?;
    if runner.config.method.method()? != PruneMethod::Slimming {
        return Err(HarnessError::Config(
            "the parameter-efficiency sweep needs method kind \"slimming\"".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for &seed in &runner.config.seeds {
        match runner.run_efficiency_seed(seed) {
            Ok(mut seed_rows) => rows.append(&mut seed_rows),
            Err(e) => errors.push(RunError {
                experiment: runner.config.name.clone(),
                seed,
                message: e.to_string(),
            }),
        }
    }
    Ok(ExperimentReport::from_rows(rows, errors, runner.hash.clone()))
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    /// A deliberately tiny experiment: narrow VGG-mini, a few dozen
    /// synthetic samples, two epochs. Each training phase is a handful of
    /// steps, so whole-protocol runs stay fast.
    fn tiny_config(kind: &str, ratios: &str, seeds: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
            name = "tiny-{kind}"
            seeds = [{seeds}]
            [model]
            family = "vgg-mini"
            num_classes = 3
            widths = [2, 2, 2, 2, 3, 3, 3, 3]
            [dataset]
            source = "synthetic"
            classes = 3
            train_samples = 48
            test_samples = 24
            batch_size = 16
            [method]
            kind = "{kind}"
            ratios = [{ratios}]
            [budget]
            epochs = 2
            milestones = [1]
            finetune_epochs = 1
            "#
        ))
        .unwrap()
    }

    fn arms_of(report: &ExperimentReport) -> Vec<(String, Arm, u64)> {
        report.rows.iter().map(|r| (r.experiment.clone(), r.arm, r.seed)).collect()
    }

    #[test]
    fn l1_pipeline_emits_every_arm_for_every_seed() {
        let config = tiny_config("l1", "0.5", "1, 2");
        let report = run_pipeline(&config).unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        let arms = arms_of(&report);
        for seed in [1, 2] {
            assert!(arms.contains(&("tiny-l1".into(), Arm::Unpruned, seed)));
            for arm in [Arm::FineTuned, Arm::ScratchE, Arm::ScratchB] {
                assert!(arms.contains(&("tiny-l1-r0.5".into(), arm, seed)));
            }
        }
        assert_eq!(report.rows.len(), 8);
        // Two seeds per group: the summaries carry a standard deviation.
        assert!(report.summaries.iter().all(|s| s.std.is_some()));
        for row in &report.rows {
            assert!((0.0..=100.0).contains(&row.accuracy), "{row:?}");
            assert_eq!(row.config_hash, report.config_hash);
        }
        // Carving halves the widths; costs must drop.
        let unpruned = report.rows.iter().find(|r| r.arm == Arm::Unpruned).unwrap();
        let pruned = report.rows.iter().find(|r| r.arm == Arm::FineTuned).unwrap();
        assert!(pruned.flops < unpruned.flops);
        assert!(pruned.params < unpruned.params);
        // Scratch-B gets more epochs than Scratch-E here (FLOPs ratio > 1,
        // proportional policy).
        let se = report.rows.iter().find(|r| r.arm == Arm::ScratchE).unwrap();
        let sb = report.rows.iter().find(|r| r.arm == Arm::ScratchB).unwrap();
        assert_eq!(se.epochs, 2);
        assert!(sb.epochs > se.epochs, "B={} E={}", sb.epochs, se.epochs);
    }

    #[test]
    fn pipeline_reruns_bitwise_identically() {
        let config = tiny_config("l1", "0.5", "3");
        let a = run_pipeline(&config).unwrap();
        let b = run_pipeline(&config).unwrap();
        assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
    }

    #[test]
    fn magnitude_keeps_dense_params_and_scales_flops() {
        let config = tiny_config("magnitude", "0.5", "1");
        let report = run_pipeline(&config).unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        let full_params = report.rows.iter().find(|r| r.arm == Arm::Unpruned).unwrap().params;
        let full_flops = report.rows.iter().find(|r| r.arm == Arm::Unpruned).unwrap().flops;
        for arm in [Arm::FineTuned, Arm::ScratchE, Arm::ScratchB] {
            let row = report.rows.iter().find(|r| r.arm == arm).unwrap();
            assert_eq!(row.params, full_params, "{arm:?}");
            assert!(row.flops < full_flops, "{arm:?}");
        }
    }

    #[test]
    fn sfp_carves_the_softly_pruned_model() {
        let config = tiny_config("sfp", "0.5", "1");
        let report = run_pipeline(&config).unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        let arms: Vec<Arm> = report.rows.iter().map(|r| r.arm).collect();
        assert_eq!(arms, vec![Arm::FineTuned, Arm::ScratchE, Arm::ScratchB]);
        // The reported model is the carved one.
        let ft = &report.rows[0];
        let full = count_flops(&config.model.to_spec().unwrap()).unwrap();
        assert!(ft.flops < full);
    }

    #[test]
    fn uniform_baselines_train_from_scratch_only() {
        let channel = run_pipeline(&tiny_config("uniform-channel", "0.5", "1")).unwrap();
        assert!(channel.errors.is_empty(), "{:?}", channel.errors);
        assert!(channel.rows.iter().all(|r| r.arm == Arm::Uniform));
        let spec = tiny_config("uniform-channel", "0.5", "1").model.to_spec().unwrap();
        assert!(channel.rows[0].params < count_params(&spec).unwrap());

        let sparse = run_pipeline(&tiny_config("uniform-sparsify", "0.5", "1")).unwrap();
        assert!(sparse.errors.is_empty(), "{:?}", sparse.errors);
        assert!(sparse.rows.iter().all(|r| r.arm == Arm::Uniform));
        // Sparsifying keeps the dense parameter count but cuts FLOPs.
        assert_eq!(sparse.rows[0].params, count_params(&spec).unwrap());
        assert!(sparse.rows[0].flops < count_flops(&spec).unwrap());
    }

    #[test]
    fn slimming_with_guided_arm_adds_stage_mean_rows() {
        let mut config = tiny_config("slimming", "0.5", "1, 2");
        config.guided.architecture = true;
        let report = run_pipeline(&config).unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        let guided: Vec<&ReportRow> =
            report.rows.iter().filter(|r| r.arm == Arm::Guided).collect();
        assert_eq!(guided.len(), 2, "one guided row per seed");
        assert!(guided.iter().all(|r| r.experiment == "tiny-slimming-r0.5"));
        assert!(guided[0].params < count_params(&config.model.to_spec().unwrap()).unwrap());
    }

    #[test]
    fn failed_seeds_are_recorded_and_the_loop_continues() {
        // A global magnitude ratio this extreme leaves whole layers without
        // weights, so the sparse re-init of the scratch arms must refuse;
        // every seed fails the same way, each with its own recorded error.
        let config = tiny_config("magnitude", "0.999", "1, 2");
        let report = run_pipeline(&config).unwrap();
        assert!(report.rows.is_empty(), "failed seeds contribute no rows");
        assert_eq!(report.errors.len(), 2);
        assert_eq!(report.errors[0].seed, 1);
        assert_eq!(report.errors[1].seed, 2, "the loop reached the second seed");
        assert!(report.errors[0].message.contains("keeps no weights"));
    }

    #[test]
    fn one_shot_lottery_reports_ticket_and_random_arms() {
        let mut config = tiny_config("l1", "0.5", "1");
        config.lottery = Some(crate::config::LotteryConfig {
            mode: "one-shot".into(),
            ratios: Some(vec![0.5]),
            rounds: 3,
            lrs: vec![0.1],
            structured: false,
        });
        config.validate().unwrap();
        let report = run_lottery(&config).unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        let arms = arms_of(&report);
        assert_eq!(
            arms,
            vec![
                ("tiny-l1-lr0.1-r0.5".into(), Arm::Ticket, 1),
                ("tiny-l1-lr0.1-r0.5".into(), Arm::RandomInit, 1),
            ]
        );
        let spec = config.model.to_spec().unwrap();
        for row in &report.rows {
            assert_eq!(row.params, count_params(&spec).unwrap());
            assert!(row.flops < count_flops(&spec).unwrap());
        }
    }

    #[test]
    fn iterative_lottery_walks_descending_sparsity_levels() {
        let mut config = tiny_config("l1", "0.5", "1");
        config.lottery = Some(crate::config::LotteryConfig {
            mode: "iterative".into(),
            ratios: None,
            rounds: 2,
            lrs: vec![0.1],
            structured: false,
        });
        let report = run_lottery(&config).unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        let tickets: Vec<&ReportRow> =
            report.rows.iter().filter(|r| r.arm == Arm::Ticket).collect();
        assert_eq!(tickets.len(), 2);
        assert_eq!(tickets[0].experiment, "tiny-l1-lr0.1-i1");
        assert_eq!(tickets[1].experiment, "tiny-l1-lr0.1-i2");
        // 80% density, then 64%: the masked FLOPs must shrink.
        assert!(tickets[1].flops < tickets[0].flops);
        assert_eq!(report.rows.iter().filter(|r| r.arm == Arm::RandomInit).count(), 2);
    }

    #[test]
    fn structured_lottery_carves_both_arms() {
        let mut config = tiny_config("l1", "0.5", "1");
        config.lottery = Some(crate::config::LotteryConfig {
            mode: "one-shot".into(),
            ratios: Some(vec![0.5]),
            rounds: 3,
            lrs: vec![0.1],
            structured: true,
        });
        let report = run_lottery(&config).unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        let spec = config.model.to_spec().unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert!(row.params < count_params(&spec).unwrap(), "carved models shrink");
        }

        config.lottery.as_mut().unwrap().mode = "iterative".into();
        assert!(matches!(run_lottery(&config), Err(HarnessError::Config(_))));
    }

    #[test]
    fn lottery_without_a_section_is_refused() {
        let config = tiny_config("l1", "0.5", "1");
        assert!(matches!(run_lottery(&config), Err(HarnessError::Config(_))));
    }

    #[test]
    fn match_uniform_ratio_recovers_an_exact_step() {
        let spec = model_zoo::vgg(model_zoo::VggVariant::VggMini, 10);
        let half = uniform_channel(&spec, 0.5).unwrap();
        let target = count_params(&half).unwrap();
        let (ratio, matched) = match_uniform_ratio(&spec, target).unwrap();
        assert_eq!(count_params(&matched).unwrap(), target);
        assert!((0.0..1.0).contains(&ratio));
        // An impossible target still returns the closest end.
        let (_, tiny) = match_uniform_ratio(&spec, 1).unwrap();
        let minimal: Vec<usize> = tiny.conv_widths();
        assert!(minimal.iter().all(|&w| w == 1));
    }

    #[test]
    fn param_efficiency_matches_uniform_params_to_slimming() {
        let mut config = tiny_config("slimming", "0.25, 0.6", "1");
        // Wider layers give the uniform grid enough resolution to match.
        config.model.widths = Some(vec![4, 4, 6, 6, 8, 8, 10, 10]);
        config.validate().unwrap();
        let report = run_param_efficiency(&config).unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        let slim: Vec<&ReportRow> =
            report.rows.iter().filter(|r| r.arm == Arm::ScratchE).collect();
        let uniform: Vec<&ReportRow> =
            report.rows.iter().filter(|r| r.arm == Arm::Uniform).collect();
        assert_eq!(slim.len(), 2);
        assert_eq!(uniform.len(), 2);
        // Deeper pruning: strictly fewer parameters for both curves.
        assert!(slim[0].params > slim[1].params);
        assert!(uniform[0].params > uniform[1].params);
        // Matched budgets: the uniform twin lands near its slimming target.
        for (s, u) in slim.iter().zip(&uniform) {
            assert_eq!(s.experiment, u.experiment);
            let rel = (s.params as f64 - u.params as f64).abs() / s.params as f64;
            assert!(rel < 0.35, "params {} vs {}", s.params, u.params);
        }
        // Efficiency runs on any other method make no sense.
        let wrong = tiny_config("l1", "0.5", "1");
        assert!(matches!(run_param_efficiency(&wrong), Err(HarnessError::Config(_))));
    }
}
