//! Sparsity and architecture analysis.
//!
//! Two artifacts flow out of pruned models and back into new experiments:
//!
//! - **Stage width summaries** — the mean number of kept channels per layer
//!   and per stage across runs. [`guided_architecture`] turns a summary into
//!   a fresh spec whose prunable layers take their stage's rounded mean
//!   width, the "design lesson" of automatic structured pruning.
//! - **Kernel sparsity patterns** — per stage, the elementwise keep
//!   frequency over all 3×3 kernels. [`guided_sparsity`] samples a fresh
//!   mask from such a pattern, i.i.d. per weight. Patterns are indexed by
//!   stage only, so a pattern learned on one architecture transfers to any
//!   other with the same stage count.
//!
//! [`weight_histogram`] bins conv weights per stage, optionally skipping
//! exact zeros so masked models can be compared against dense ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use model_zoo::{stages_of, validate, ArchitectureSpec};
use pruning::{BitMask, ChannelKeepSet, PruneMask};
use tensor_core::{LayerKind, Network, ParamName, Src};

use crate::error::{HarnessError, Result};

// ---------------------------------------------------------------------------
// Channel bookkeeping

/// Output channel count per record, `None` once the activation is flat.
fn channel_counts(spec: &ArchitectureSpec) -> Vec<Option<usize>> {
    let mut out: Vec<Option<usize>> = Vec::with_capacity(spec.records.len());
    for rec in &spec.records {
        let input_c = rec.inputs.first().and_then(|src| match src {
            Src::Input => Some(spec.input_shape.0),
            Src::Node(j) => out[*j],
        });
        out.push(match rec.kind {
            LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
            LayerKind::BatchNorm { .. }
            | LayerKind::Relu
            | LayerKind::MaxPool { .. }
            | LayerKind::AvgPool { .. }
            | LayerKind::ResidualAdd => input_c,
            LayerKind::Flatten | LayerKind::Dense { .. } | LayerKind::SoftmaxCrossEntropy => None,
        });
    }
    out
}

/// `(out_channels, in_channels, kernel)` for conv record `i`.
fn conv_dims(spec: &ArchitectureSpec, channels: &[Option<usize>], i: usize) -> Result<(usize, usize, usize)> {
    let LayerKind::Conv2d { out_channels, kernel, .. } = spec.records[i].kind else {
        return Err(HarnessError::Analysis(format!("record {i} is not a convolution")));
    };
    let c_in = rec_input_channels(spec, channels, i)?;
    Ok((out_channels, c_in, kernel))
}

fn rec_input_channels(
    spec: &ArchitectureSpec,
    channels: &[Option<usize>],
    i: usize,
) -> Result<usize> {
    let src = spec.records[i]
        .inputs
        .first()
        .ok_or_else(|| HarnessError::Analysis(format!("record {i} has no inputs")))?;
    let c = match src {
        Src::Input => Some(spec.input_shape.0),
        Src::Node(j) => channels[*j],
    };
    c.ok_or_else(|| HarnessError::Analysis(format!("record {i} has a flat input")))
}

// ---------------------------------------------------------------------------
// Stage width summaries

/// Kept-channel statistics for one prunable convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWidthStat {
    /// Record index of the convolution.
    pub conv: usize,
    pub stage: usize,
    /// Full width in the source architecture.
    pub full: usize,
    /// Mean kept channels across runs.
    pub mean: f64,
    /// Sample standard deviation; absent with a single run.
    pub std: Option<f64>,
}

/// Mean kept channels per layer and per stage, across pruning runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageWidthSummary {
    pub layers: Vec<LayerWidthStat>,
    /// Mean kept channels per stage, over all (layer, run) pairs.
    pub stage_means: Vec<f64>,
    pub runs: usize,
}

/// Aggregates keep-sets from repeated runs of one experiment into per-layer
/// and per-stage width statistics. All runs must cover the same layers of
/// the same spec.
pub fn extract_stage_widths(
    runs: &[ChannelKeepSet],
    spec: &ArchitectureSpec,
) -> Result<StageWidthSummary> {
    if runs.is_empty() {
        return Err(HarnessError::Analysis("no runs to summarize".into()));
    }
    let keys: Vec<usize> = runs[0].layers.keys().copied().collect();
    for r in runs {
        r.validate_against(spec)?;
        if r.layers.keys().copied().collect::<Vec<_>>() != keys {
            return Err(HarnessError::Analysis(
                "runs cover different layer sets (mixed specs?)".into(),
            ));
        }
    }
    let stages = stages_of(spec)?;
    let stage_count = stages.values().copied().max().map_or(0, |m| m + 1);
    let widths: BTreeMap<usize, usize> = spec
        .conv_layers()
        .into_iter()
        .zip(spec.conv_widths())
        .collect();
    let mut layers = Vec::with_capacity(keys.len());
    let mut per_stage: Vec<Vec<f64>> = vec![Vec::new(); stage_count];
    for &conv in &keys {
        let counts: Vec<f64> = runs.iter().map(|r| r.layers[&conv].len() as f64).collect();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        let std = (counts.len() >= 2).then(|| {
            let ss = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>();
            (ss / (counts.len() - 1) as f64).sqrt()
        });
        let stage = *stages
            .get(&conv)
            .ok_or_else(|| HarnessError::Analysis(format!("conv {conv} has no stage")))?;
        per_stage[stage].extend(&counts);
        layers.push(LayerWidthStat { conv, stage, full: widths[&conv], mean, std });
    }
    let stage_means = per_stage
        .into_iter()
        .enumerate()
        .map(|(s, v)| {
            if v.is_empty() {
                Err(HarnessError::Analysis(format!("stage {s} has no covered layers")))
            } else {
                Ok(v.iter().sum::<f64>() / v.len() as f64)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(StageWidthSummary { layers, stage_means, runs: runs.len() })
}

// ---------------------------------------------------------------------------
// Kernel sparsity patterns

/// Keep statistics of one stage: a 3×3 keep-probability grid (unstructured
/// masks) or a scalar keep ratio (structured keep-sets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StagePattern {
    Kernel([[f64; 3]; 3]),
    Channel(f64),
}

/// Per-stage sparsity description; all entries lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPattern {
    pub stages: Vec<StagePattern>,
}

impl SparsityPattern {
    /// Checks every entry is a probability.
    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p) && p.is_finite();
        for (s, stage) in self.stages.iter().enumerate() {
            let good = match stage {
                StagePattern::Kernel(grid) => grid.iter().flatten().all(|&p| ok(p)),
                StagePattern::Channel(p) => ok(*p),
            };
            if !good {
                return Err(HarnessError::Analysis(format!("stage {s} has entries outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Elementwise keep frequency of every masked 3×3 kernel, per stage.
///
/// Position `(i, j)` of stage `s` is the fraction of all `C_out·C_in`
/// kernels (over every masked 3×3 conv in the stage) whose `(i, j)` weight
/// survives. Every stage must contain at least one masked 3×3 convolution.
pub fn analyze_kernel_pattern(
    mask: &PruneMask,
    spec: &ArchitectureSpec,
) -> Result<SparsityPattern> {
    let stages = stages_of(spec)?;
    let stage_count = stages.values().copied().max().map_or(0, |m| m + 1);
    let channels = channel_counts(spec);
    let mut kept = vec![[[0u64; 3]; 3]; stage_count];
    let mut total = vec![0u64; stage_count];
    for (&conv, bits) in mask.layers() {
        let Some(&stage) = stages.get(&conv) else {
            return Err(HarnessError::Analysis(format!("masked record {conv} is not a conv")));
        };
        let (c_out, c_in, kernel) = conv_dims(spec, &channels, conv)?;
        if kernel != 3 {
            continue;
        }
        if bits.len() != c_out * c_in * 9 {
            return Err(HarnessError::Analysis(format!(
                "mask for conv {conv} has {} bits, expected {}",
                bits.len(),
                c_out * c_in * 9
            )));
        }
        total[stage] += (c_out * c_in) as u64;
        for idx in 0..bits.len() {
            if bits.get(idx) {
                let pos = idx % 9;
                kept[stage][pos / 3][pos % 3] += 1;
            }
        }
    }
    let stages_out = kept
        .into_iter()
        .zip(&total)
        .enumerate()
        .map(|(s, (grid, &n))| {
            if n == 0 {
                return Err(HarnessError::Analysis(format!(
                    "stage {s} has no masked 3x3 convolution"
                )));
            }
            let mut out = [[0.0f64; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    out[i][j] = grid[i][j] as f64 / n as f64;
                }
            }
            Ok(StagePattern::Kernel(out))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SparsityPattern { stages: stages_out })
}

/// Scalar keep ratio per stage from a structured keep-set.
pub fn analyze_channel_pattern(
    keep: &ChannelKeepSet,
    spec: &ArchitectureSpec,
) -> Result<SparsityPattern> {
    keep.validate_against(spec)?;
    let stages = stages_of(spec)?;
    let stage_count = stages.values().copied().max().map_or(0, |m| m + 1);
    let widths: BTreeMap<usize, usize> = spec
        .conv_layers()
        .into_iter()
        .zip(spec.conv_widths())
        .collect();
    let mut kept = vec![0usize; stage_count];
    let mut total = vec![0usize; stage_count];
    for (&conv, channels) in &keep.layers {
        let stage = stages[&conv];
        kept[stage] += channels.len();
        total[stage] += widths[&conv];
    }
    let stages_out = kept
        .into_iter()
        .zip(total)
        .enumerate()
        .map(|(s, (k, t))| {
            if t == 0 {
                Err(HarnessError::Analysis(format!("stage {s} has no covered layers")))
            } else {
                Ok(StagePattern::Channel(k as f64 / t as f64))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SparsityPattern { stages: stages_out })
}

// ---------------------------------------------------------------------------
// Guided construction

/// Builds a new architecture whose prunable convs take the rounded mean
/// width of their stage (floor 1). Stage counts must match.
pub fn guided_architecture(
    summary: &StageWidthSummary,
    target: &ArchitectureSpec,
) -> Result<ArchitectureSpec> {
    let stages = stages_of(target)?;
    let stage_count = stages.values().copied().max().map_or(0, |m| m + 1);
    if stage_count != summary.stage_means.len() {
        return Err(HarnessError::Analysis(format!(
            "summary has {} stages, target has {stage_count}",
            summary.stage_means.len()
        )));
    }
    let mut out = target.clone();
    out.name = format!("{}-guided", target.name);
    for conv in target.prunable_convs() {
        let width = cost_model::round_half_up(summary.stage_means[stages[&conv]]).max(1);
        if let LayerKind::Conv2d { ref mut out_channels, .. } = out.records[conv].kind {
            *out_channels = width;
        }
    }
    validate(&out)?;
    Ok(out)
}

/// Samples a weight mask for `target` from a kernel pattern: each 3×3 conv
/// weight at position `(i, j)` of stage `s` is kept i.i.d. with probability
/// `pattern[s][i][j]`. Transfer across architectures is allowed whenever the
/// stage counts agree; non-3×3 convs are left unmasked.
pub fn guided_sparsity(
    pattern: &SparsityPattern,
    target: &ArchitectureSpec,
    seed: u64,
) -> Result<PruneMask> {
    pattern.validate()?;
    let grids: Vec<[[f64; 3]; 3]> = pattern
        .stages
        .iter()
        .map(|s| match s {
            StagePattern::Kernel(g) => Ok(*g),
            StagePattern::Channel(_) => Err(HarnessError::Analysis(
                "guided sparsification needs kernel grids, got a structured pattern".into(),
            )),
        })
        .collect::<Result<_>>()?;
    let stages = stages_of(target)?;
    let stage_count = stages.values().copied().max().map_or(0, |m| m + 1);
    if stage_count != grids.len() {
        return Err(HarnessError::Analysis(format!(
            "pattern has {} stages, target has {stage_count}",
            grids.len()
        )));
    }
    let channels = channel_counts(target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = PruneMask::new();
    for conv in target.conv_layers() {
        let (c_out, c_in, kernel) = conv_dims(target, &channels, conv)?;
        if kernel != 3 {
            continue;
        }
        let grid = grids[stages[&conv]];
        let mut bits = BitMask::zeros(c_out * c_in * 9);
        for idx in 0..bits.len() {
            let pos = idx % 9;
            if rng.gen_bool(grid[pos / 3][pos % 3]) {
                bits.set(idx, true);
            }
        }
        mask.insert(conv, bits);
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Weight histograms

/// Histogram of conv weight values in one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHistogram {
    pub stage: usize,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

/// Bins every conv weight by stage. `exclude_zeros` skips exact zeros, the
/// footprint of masked positions. Bin edges span the stage's own min/max;
/// a degenerate range (all values equal) puts everything in bin 0.
pub fn weight_histogram(
    net: &Network<f32>,
    spec: &ArchitectureSpec,
    bins: usize,
    exclude_zeros: bool,
) -> Result<Vec<StageHistogram>> {
    if bins < 2 {
        return Err(HarnessError::Analysis(format!("need at least 2 bins, got {bins}")));
    }
    let stages = stages_of(spec)?;
    let stage_count = stages.values().copied().max().map_or(0, |m| m + 1);
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); stage_count];
    for conv in spec.conv_layers() {
        let w = net
            .param(conv, ParamName::Weight)
            .ok_or_else(|| HarnessError::Analysis(format!("conv {conv} has no weight")))?;
        let bucket = &mut values[stages[&conv]];
        for &v in w.data() {
            if exclude_zeros && v == 0.0 {
                continue;
            }
            bucket.push(v as f64);
        }
    }
    Ok(values
        .into_iter()
        .enumerate()
        .map(|(stage, vals)| {
            let (lo, hi) = vals
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let (lo, hi) = if vals.is_empty() { (0.0, 0.0) } else { (lo, hi) };
            let mut counts = vec![0u64; bins];
            for &v in &vals {
                let bin = if hi > lo {
                    (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
                } else {
                    0
                };
                counts[bin] += 1;
            }
            StageHistogram { stage, lo, hi, counts }
        })
        .collect())
}

// ---------------------------------------------------------------------------
