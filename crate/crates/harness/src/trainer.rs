//! The training loop: minibatch SGD under a [`TrainBudget`].
//!
//! A [`TrainSession`] owns the network and optimizer and borrows the data;
//! its position in the schedule is *derived from the network's step counter*
//! (`epoch = steps / steps_per_epoch`), never stored separately, so a
//! checkpointed network resumes at exactly the right minibatch.
//!
//! Determinism contract, given `(seed, budget, data, options)`:
//! - the epoch-`e` shuffle comes from a throwaway RNG keyed by `(seed, e)`,
//!   so it can be regenerated at any resume point without replaying epochs;
//! - augmentation draws come from the session RNG (stream 1 of `seed`),
//!   whose position is saved in checkpoints — mid-epoch resume continues the
//!   draw sequence bit-exactly;
//! - everything else (init, engine, optimizer) is already deterministic.
//!
//! Method hooks mirror how the pruning methods interleave with training:
//! a sparsity penalty on BN scales is added between backward and the step,
//! a weight mask turns every step into a masked step, and soft filter
//! pruning re-zeroes the weakest filters after each epoch's last step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cost_model::TrainBudget;
use model_zoo::describe;
use pruning::{masked_train_step, slimming_penalty, soft_filter_prune_epoch, PruneMask, SfpConfig};
use tensor_core::{sgd_step, Mode, Network, OptimizerState};

use crate::data::{assemble_batch, DataBundle, RawDataset, Normalizer};
use crate::error::{HarnessError, Result};

/// Stream id of the augmentation RNG (stream 0 is never used, so a plain
/// `seed_from_u64` generator elsewhere cannot collide with it).
const AUG_STREAM: u64 = 1;

/// Throwaway generator for the epoch-`epoch` shuffle.
fn perm_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(2);
    rng
}

/// Fresh augmentation RNG for a session seeded with `seed`.
pub fn augmentation_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(AUG_STREAM);
    rng
}

// ---------------------------------------------------------------------------

/// Knobs that select the training variant. Defaults are the plain loop.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Sparsity penalty coefficient on BN scales (the slimming objective).
    pub slimming_lambda: Option<f64>,
    /// Soft filter pruning applied after each epoch.
    pub sfp: Option<SfpConfig>,
    /// Weight mask enforced on every step (sparse training).
    pub mask: Option<PruneMask>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 1e-4,
            slimming_lambda: None,
            sfp: None,
            mask: None,
        }
    }
}

/// One optimizer step's worth of bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

// ---------------------------------------------------------------------------

/// An in-flight training run.
pub struct TrainSession<'a> {
    net: Network<f32>,
    opt: OptimizerState<f32>,
    budget: TrainBudget,
    data: &'a DataBundle,
    seed: u64,
    aug_rng: ChaCha8Rng,
    batch_size: usize,
    steps_per_epoch: usize,
    perm: Vec<usize>,
    perm_epoch: Option<usize>,
    slimming_lambda: Option<f64>,
    bn_nodes: Vec<usize>,
    sfp: Option<SfpConfig>,
    mask: Option<PruneMask>,
}

impl<'a> TrainSession<'a> {
    /// Starts a session at the network's current step counter (0 for a fresh
    /// phase; callers reset the counter when a new budget begins).
    pub fn new(
        net: Network<f32>,
        budget: TrainBudget,
        data: &'a DataBundle,
        seed: u64,
        opts: TrainOptions,
    ) -> Result<Self> {
        let opt = OptimizerState::new(&net, opts.momentum, opts.weight_decay)?;
        Self::with_state(net, opt, augmentation_rng(seed), budget, data, seed, opts)
    }

    /// Resumes with explicit optimizer and augmentation-RNG state (both come
    /// from a checkpoint; the shuffle is regenerated, not stored).
    pub fn with_state(
        net: Network<f32>,
        opt: OptimizerState<f32>,
        aug_rng: ChaCha8Rng,
        budget: TrainBudget,
        data: &'a DataBundle,
        seed: u64,
        opts: TrainOptions,
    ) -> Result<Self> {
        budget.validate().map_err(HarnessError::Cost)?;
        if opts.batch_size == 0 {
            return Err(HarnessError::Config("batch size must be ≥ 1".into()));
        }
        if data.train.is_empty() {
            return Err(HarnessError::Config("training split is empty".into()));
        }
        if opts.sfp.is_some() && opts.mask.is_some() {
            return Err(HarnessError::Config(
                "soft filter pruning and a weight mask are mutually exclusive".into(),
            ));
        }
        if net.num_classes() != data.classes() {
            return Err(HarnessError::Config(format!(
                "network has {} classes, dataset has {}",
                net.num_classes(),
                data.classes()
            )));
        }
        if let Some(m) = &opts.mask {
            m.validate_against(&net)?;
        }
        let bn_nodes = if opts.slimming_lambda.is_some() {
            let spec = describe(&net, "session");
            spec.prunable_convs()
                .into_iter()
                .filter_map(|c| spec.governing_bn(c))
                .collect()
        } else {
            Vec::new()
        };
        let steps_per_epoch = data.train.len().div_ceil(opts.batch_size);
        Ok(TrainSession {
            net,
            opt,
            budget,
            data,
            seed,
            aug_rng,
            batch_size: opts.batch_size,
            steps_per_epoch,
            perm: Vec::new(),
            perm_epoch: None,
            slimming_lambda: opts.slimming_lambda,
            bn_nodes,
            sfp: opts.sfp,
            mask: opts.mask,
        })
    }

    pub fn net(&self) -> &Network<f32> {
        &self.net
    }

    pub fn optimizer(&self) -> &OptimizerState<f32> {
        &self.opt
    }

    pub fn aug_rng(&self) -> &ChaCha8Rng {
        &self.aug_rng
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    /// Epoch the next step belongs to.
    pub fn epoch(&self) -> usize {
        self.net.steps() as usize / self.steps_per_epoch
    }

    pub fn is_complete(&self) -> bool {
        self.epoch() >= self.budget.epochs
    }

    /// Surrenders the trained network (plus optimizer and RNG, for saving).
    pub fn into_parts(self) -> (Network<f32>, OptimizerState<f32>, ChaCha8Rng) {
        (self.net, self.opt, self.aug_rng)
    }

    /// Runs one minibatch: shuffle bookkeeping, augmentation, forward,
    /// backward, hooks, optimizer step.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.is_complete() {
            return Err(HarnessError::Config("training budget exhausted".into()));
        }
        let s = self.net.steps() as usize;
        let (epoch, step) = (s / self.steps_per_epoch, s % self.steps_per_epoch);
        if self.perm_epoch != Some(epoch) {
            self.perm = (0..self.data.train.len()).collect();
            self.perm.shuffle(&mut perm_rng(self.seed, epoch));
            self.perm_epoch = Some(epoch);
        }
        let lo = step * self.batch_size;
        let hi = (lo + self.batch_size).min(self.perm.len());
        let batch = assemble_batch(
            &self.data.train,
            &self.perm[lo..hi],
            &self.data.norm,
            Some(&mut self.aug_rng),
        )?;
        let trace = self.net.forward(&batch.images, &batch.labels, Mode::Train)?;
        let loss = trace.loss();
        self.net.backward(trace)?;
        if let Some(lambda) = self.slimming_lambda {
            slimming_penalty(&mut self.net, lambda, &self.bn_nodes)?;
        }
        let lr = self.budget.lr_at_epoch(epoch);
        match &self.mask {
            Some(m) => masked_train_step(&mut self.net, m, &mut self.opt, lr)?,
            None => sgd_step(&mut self.net, &mut self.opt, lr)?,
        }
        if step + 1 == self.steps_per_epoch {
            if let Some(cfg) = &self.sfp {
                soft_filter_prune_epoch(&mut self.net, cfg)?;
            }
        }
        Ok(StepReport { epoch, step, loss, lr })
    }

    /// Steps to the end of the current epoch.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let epoch = self.epoch();
        let mut total = 0.0;
        let mut count = 0usize;
        let mut lr = self.budget.lr_at_epoch(epoch);
        while !self.is_complete() && self.epoch() == epoch {
            let r = self.step()?;
            total += r.loss;
            count += 1;
            lr = r.lr;
        }
        Ok(EpochReport { epoch, mean_loss: total / count.max(1) as f64, lr })
    }

    /// Steps to the end of the budget; returns one report per epoch run.
    pub fn run(&mut self) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while !self.is_complete() {
            reports.push(self.run_epoch()?);
        }
        Ok(reports)
    }
}

// ---------------------------------------------------------------------------

/// Top-1 accuracy (percent) on a split, batch norm in eval mode.
pub fn evaluate(
    net: &mut Network<f32>,
    data: &RawDataset,
    norm: &Normalizer,
    batch_size: usize,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(HarnessError::Config("batch size must be ≥ 1".into()));
    }
    let mut correct = 0usize;
    let mut seen = 0usize;
    while seen < data.len() {
        let hi = (seen + batch_size).min(data.len());
        let indices: Vec<usize> = (seen..hi).collect();
        let batch = assemble_batch(data, &indices, norm, None)?;
        let trace = net.forward(&batch.images, &batch.labels, Mode::Eval)?;
        correct += trace
            .predictions()
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
        seen = hi;
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
