//! Channel keep sets and network surgery.
//!
//! Surgery turns a keep set into an actually-smaller network: a fresh spec
//! with the surviving widths, surviving conv filters copied over, the next
//! layer's input slices gathered to match, BN vectors (including running
//! statistics) sliced identically, and the classifier's input columns
//! gathered through the flatten. The source network is never aliased.
//!
//! The correctness story is the zero-masked oracle, also exported here
//! ([`zero_pruned_channels`]): zeroing a pruned filter *and* its governing
//! BN's scale/shift silences that channel exactly, so the surgered net and
//! the zero-masked original must agree on every input up to GEMM summation
//! order. Fine-tuning after surgery refreshes the copied BN statistics on
//! the first training epochs, so no separate recalibration pass is needed.

use std::collections::BTreeMap;

use model_zoo::{build, describe, ArchitectureSpec};
use serde::{Deserialize, Serialize};
use tensor_core::{IoShape, LayerKind, Network, ParamName, Scalar, Src};

use crate::criteria::round_half_up_count;
use crate::error::{PruneError, Result};

// ---------------------------------------------------------------------------
// ChannelKeepSet
// ---------------------------------------------------------------------------

/// Sorted kept output-channel indices per prunable conv, keyed by node index.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChannelKeepSet {
    pub layers: BTreeMap<usize, Vec<usize>>,
}

impl ChannelKeepSet {
    pub fn new() -> Self {
        ChannelKeepSet::default()
    }

    pub fn insert(&mut self, layer: usize, kept: Vec<usize>) {
        self.layers.insert(layer, kept);
    }

    pub fn total_kept(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }

    /// Every key must be a prunable conv of `spec`; every list sorted,
    /// unique, non-empty and within the layer's width.
    pub fn validate_against(&self, spec: &ArchitectureSpec) -> Result<()> {
        let prunable: std::collections::BTreeSet<usize> =
            spec.prunable_convs().into_iter().collect();
        for (&layer, kept) in &self.layers {
            if !prunable.contains(&layer) {
                return Err(PruneError::Inconsistent {
                    layer,
                    detail: "keep set names a layer that is not a prunable conv".into(),
                });
            }
            let width = match spec.records[layer].kind {
                LayerKind::Conv2d { out_channels, .. } => out_channels,
                _ => unreachable!("prunable layers are convs"),
            };
            if kept.is_empty() {
                return Err(PruneError::Inconsistent {
                    layer,
                    detail: "keep set leaves no channels".into(),
                });
            }
            if kept.windows(2).any(|p| p[1] <= p[0]) {
                return Err(PruneError::Inconsistent {
                    layer,
                    detail: "kept indices must be sorted and unique".into(),
                });
            }
            if *kept.last().unwrap() >= width {
                return Err(PruneError::Inconsistent {
                    layer,
                    detail: format!("kept index {} out of range {width}", kept.last().unwrap()),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Surgery
// ---------------------------------------------------------------------------

/// Kept output-channel indices per node, `None` meaning "all channels".
fn propagate_keeps<T: Scalar>(
    net: &Network<T>,
    spec: &ArchitectureSpec,
    keep: &ChannelKeepSet,
) -> Result<Vec<Option<Vec<usize>>>> {
    let n = spec.records.len();
    let mut chan: Vec<Option<Vec<usize>>> = vec![None; n];
    for i in 0..n {
        let rec = &spec.records[i];
        let inherit = |src: Src, chan: &[Option<Vec<usize>>]| -> Option<Vec<usize>> {
            match src {
                Src::Input => None,
                Src::Node(j) => chan[j].clone(),
            }
        };
        chan[i] = match rec.kind {
            LayerKind::Conv2d { .. } => keep.layers.get(&i).cloned(),
            LayerKind::BatchNorm { .. }
            | LayerKind::Relu
            | LayerKind::MaxPool { .. }
            | LayerKind::AvgPool { .. } => inherit(rec.inputs[0], &chan),
            LayerKind::ResidualAdd => {
                let a = inherit(rec.inputs[0], &chan);
                let b = inherit(rec.inputs[1], &chan);
                if a != b {
                    return Err(PruneError::Inconsistent {
                        layer: i,
                        detail: "residual branches keep different channels".into(),
                    });
                }
                a
            }
            LayerKind::Flatten => match inherit(rec.inputs[0], &chan) {
                None => None,
                Some(ks) => {
                    let (h, w) = match rec.inputs[0] {
                        Src::Node(j) => match net.shape_of(j) {
                            IoShape::Spatial { h, w, .. } => (h, w),
                            _ => (1, 1),
                        },
                        Src::Input => {
                            let (_, h, w) = net.input_shape();
                            (h, w)
                        }
                    };
                    // Feature index = channel * (h*w) + pixel.
                    let hw = h * w;
                    Some(ks.iter().flat_map(|&c| c * hw..(c + 1) * hw).collect())
                }
            },
            LayerKind::Dense { .. } | LayerKind::SoftmaxCrossEntropy => None,
        };
    }
    Ok(chan)
}

fn gather_vec<T: Scalar>(old: &[T], sel: Option<&Vec<usize>>) -> Vec<T> {
    match sel {
        None => old.to_vec(),
        Some(idx) => idx.iter().map(|&i| old[i]).collect(),
    }
}

/// Cut a network down to a keep set.
///
/// Returns the smaller network (fresh, step counter zero) and its spec,
/// named `name`. The keep set may cover any subset of the prunable convs;
/// uncovered layers keep all channels.
pub fn surgery<T: Scalar>(
    net: &Network<T>,
    keep: &ChannelKeepSet,
    name: &str,
) -> Result<(Network<T>, ArchitectureSpec)> {
    let old_spec = describe(net, name);
    keep.validate_against(&old_spec)?;
    let chan = propagate_keeps(net, &old_spec, keep)?;

    let mut new_spec = old_spec.clone();
    for (&layer, kept) in &keep.layers {
        if let LayerKind::Conv2d { ref mut out_channels, .. } = new_spec.records[layer].kind {
            *out_channels = kept.len();
        }
    }
    let mut small = build::<T>(&new_spec)?;

    for i in 0..old_spec.records.len() {
        let in_sel: Option<Vec<usize>> = match old_spec.records[i].inputs.first() {
            Some(Src::Node(j)) => chan[*j].clone(),
            _ => None,
        };
        match old_spec.records[i].kind {
            LayerKind::Conv2d { kernel, .. } => {
                let old_w = net.param(i, ParamName::Weight).expect("conv weight");
                let (co_old, ci_old) = (old_w.shape()[0], old_w.shape()[1]);
                let out_idx: Vec<usize> =
                    chan[i].clone().unwrap_or_else(|| (0..co_old).collect());
                let in_idx: Vec<usize> =
                    in_sel.clone().unwrap_or_else(|| (0..ci_old).collect());
                let kk = kernel * kernel;
                let src = old_w.data();
                let new_w = small.param_mut(i, ParamName::Weight).unwrap();
                let ci_new = new_w.shape()[1];
                let dst = new_w.data_mut();
                for (o_new, &o_old) in out_idx.iter().enumerate() {
                    for (c_new, &c_old) in in_idx.iter().enumerate() {
                        let s = (o_old * ci_old + c_old) * kk;
                        let d = (o_new * ci_new + c_new) * kk;
                        dst[d..d + kk].copy_from_slice(&src[s..s + kk]);
                    }
                }
                if let Some(old_b) = net.param(i, ParamName::Bias) {
                    let gathered = gather_vec(old_b.data(), chan[i].as_ref());
                    small
                        .param_mut(i, ParamName::Bias)
                        .unwrap()
                        .data_mut()
                        .copy_from_slice(&gathered);
                }
            }
            LayerKind::BatchNorm { .. } => {
                for name in [
                    ParamName::Gamma,
                    ParamName::Beta,
                    ParamName::RunningMean,
                    ParamName::RunningVar,
                ] {
                    let old_p = net.param(i, name).expect("bn param");
                    let gathered = gather_vec(old_p.data(), chan[i].as_ref());
                    small.param_mut(i, name).unwrap().data_mut().copy_from_slice(&gathered);
                }
            }
            LayerKind::Dense { .. } => {
                let old_w = net.param(i, ParamName::Weight).unwrap();
                let (out, in_old) = (old_w.shape()[0], old_w.shape()[1]);
                let in_idx: Vec<usize> = in_sel.clone().unwrap_or_else(|| (0..in_old).collect());
                let src = old_w.data();
                let new_w = small.param_mut(i, ParamName::Weight).unwrap();
                let in_new = new_w.shape()[1];
                let dst = new_w.data_mut();
                for o in 0..out {
                    for (j_new, &j_old) in in_idx.iter().enumerate() {
                        dst[o * in_new + j_new] = src[o * in_old + j_old];
                    }
                }
                if let Some(old_b) = net.param(i, ParamName::Bias) {
                    small
                        .param_mut(i, ParamName::Bias)
                        .unwrap()
                        .data_mut()
                        .copy_from_slice(old_b.data());
                }
            }
            _ => {}
        }
    }
    Ok((small, new_spec))
}

/// Silence pruned channels in place: zero each pruned filter and the
/// scale/shift of its governing BN. The network keeps its architecture; its
/// outputs become exactly those of the surgered network (the oracle used by
/// the equivalence tests, and the "pruned but not yet carved" view).
pub fn zero_pruned_channels<T: Scalar>(
    net: &mut Network<T>,
    keep: &ChannelKeepSet,
) -> Result<()> {
    let spec = describe(net, "masked");
    keep.validate_against(&spec)?;
    for (&layer, kept) in &keep.layers {
        let keep_set: std::collections::BTreeSet<usize> = kept.iter().copied().collect();
        let weight = net.param_mut(layer, ParamName::Weight).unwrap();
        let c_out = weight.shape()[0];
        let per = weight.len() / c_out;
        for f in (0..c_out).filter(|f| !keep_set.contains(f)) {
            weight.data_mut()[f * per..(f + 1) * per].fill(T::ZERO);
        }
        if let Some(bias) = net.param_mut(layer, ParamName::Bias) {
            for f in (0..c_out).filter(|f| !keep_set.contains(f)) {
                bias.data_mut()[f] = T::ZERO;
            }
        }
        let bn = spec.governing_bn(layer).ok_or(PruneError::Inconsistent {
            layer,
            detail: "prunable conv has no governing BN".into(),
        })?;
        for name in [ParamName::Gamma, ParamName::Beta] {
            let p = net.param_mut(bn, name).unwrap();
            for f in (0..c_out).filter(|f| !keep_set.contains(f)) {
                p.data_mut()[f] = T::ZERO;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Uniform channel pruning
// ---------------------------------------------------------------------------

/// Shrink every prunable width `w` to `max(1, round((1-ratio)·w))`, the
/// uniform-architecture baseline. `ratio = 0` returns the spec unchanged.
pub fn uniform_channel(spec: &ArchitectureSpec, ratio: f64) -> Result<ArchitectureSpec> {
    if !(0.0..1.0).contains(&ratio) || !ratio.is_finite() {
        return Err(PruneError::InvalidArg(format!("ratio must be in [0,1), got {ratio}")));
    }
    let mut out = spec.clone();
    for i in spec.prunable_convs() {
        if let LayerKind::Conv2d { ref mut out_channels, .. } = out.records[i].kind {
            *out_channels = round_half_up_count((1.0 - ratio) * *out_channels as f64).max(1);
        }
    }
    model_zoo::validate(&out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::l1_keep_top_k;
    use model_zoo::{preresnet, vgg, VggVariant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tensor_core::{init_network, Mode, Tensor};

    fn random_batch(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), n: usize) -> Tensor<f32> {
        let (c, h, w) = shape;
        let data: Vec<f32> = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[n, c, h, w], data).unwrap()
    }

    fn keep_all(spec: &ArchitectureSpec) -> ChannelKeepSet {
        let mut keep = ChannelKeepSet::new();
        for i in spec.prunable_convs() {
            if let LayerKind::Conv2d { out_channels, .. } = spec.records[i].kind {
                keep.insert(i, (0..out_channels).collect());
            }
        }
        keep
    }

    /// Random keep set: each prunable conv keeps a random non-empty subset.
    fn random_keep(spec: &ArchitectureSpec, rng: &mut ChaCha8Rng) -> ChannelKeepSet {
        let mut keep = ChannelKeepSet::new();
        for i in spec.prunable_convs() {
            if let LayerKind::Conv2d { out_channels, .. } = spec.records[i].kind {
                let mut kept: Vec<usize> =
                    (0..out_channels).filter(|_| rng.gen_bool(0.6)).collect();
                if kept.is_empty() {
                    kept.push(rng.gen_range(0..out_channels));
                }
                keep.insert(i, kept);
            }
        }
        keep
    }

    fn eval_logits(net: &mut Network<f32>, x: &Tensor<f32>) -> Vec<f32> {
        let n = x.shape()[0];
        let trace = net.forward(x, &vec![0; n], Mode::Eval).unwrap();
        trace.logits().data().to_vec()
    }

    #[test]
    fn keep_all_surgery_is_the_identity_and_idempotent() {
        let spec = vgg(VggVariant::VggMini, 10);
        let mut net = build::<f32>(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_network(&mut net, &mut rng);

        let keep = keep_all(&spec);
        let (mut once, spec_once) = surgery(&net, &keep, "mini").unwrap();
        assert_eq!(spec_once, describe(&net, "mini"));

        let x = random_batch(&mut rng, spec.input_shape, 4);
        assert_eq!(eval_logits(&mut net.clone(), &x), eval_logits(&mut once, &x));

        let (mut twice, spec_twice) = surgery(&once, &keep_all(&spec_once), "mini").unwrap();
        assert_eq!(spec_twice, spec_once);
        assert_eq!(eval_logits(&mut twice, &x), eval_logits(&mut once, &x));
    }

    fn assert_zero_mask_equivalence(spec: &ArchitectureSpec, seed: u64, batches: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = build::<f32>(spec).unwrap();
        init_network(&mut net, &mut rng);
        // Make running stats non-trivial so eval mode is a real test.
        for i in 0..net.num_nodes() {
            if net.param(i, ParamName::RunningMean).is_some() {
                let c = net.param(i, ParamName::RunningMean).unwrap().len();
                let vals: Vec<f32> = (0..c).map(|_| rng.gen_range(-0.3..0.3)).collect();
                net.param_mut(i, ParamName::RunningMean)
                    .unwrap()
                    .data_mut()
                    .copy_from_slice(&vals);
                let vars: Vec<f32> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
                net.param_mut(i, ParamName::RunningVar)
                    .unwrap()
                    .data_mut()
                    .copy_from_slice(&vars);
            }
        }

        let keep = random_keep(spec, &mut rng);
        let (mut small, small_spec) = surgery(&net, &keep, "pruned").unwrap();
        for (&layer, kept) in &keep.layers {
            if let LayerKind::Conv2d { out_channels, .. } = small_spec.records[layer].kind {
                assert_eq!(out_channels, kept.len());
            }
        }

        let mut masked = net.clone();
        zero_pruned_channels(&mut masked, &keep).unwrap();

        for _ in 0..batches {
            let x = random_batch(&mut rng, spec.input_shape, 4);
            let a = eval_logits(&mut small, &x);
            let b = eval_logits(&mut masked, &x);
            let diff = a
                .iter()
                .zip(&b)
                .map(|(p, q)| (p - q).abs())
                .fold(0f32, f32::max);
            assert!(diff < 1e-5, "logit mismatch {diff}");
        }
    }

    #[test]
    fn surgered_vgg_equals_the_zero_masked_original() {
        for seed in [3, 4, 5] {
            assert_zero_mask_equivalence(&vgg(VggVariant::VggMini, 10), seed, 4);
        }
    }

    #[test]
    fn surgered_preresnet_equals_the_zero_masked_original() {
        for seed in [6, 7] {
            assert_zero_mask_equivalence(&preresnet(20, 10).unwrap(), seed, 3);
        }
    }

    #[test]
    fn published_sixty_percent_slimming_widths_are_consistent() {
        // Reference per-layer mean widths from a well-known 60%-channel
        // slimming result on this 13-conv VGG; the totals must re-derive.
        let width_star = [
            39.0, 64.0, 127.8, 128.0, 255.0, 250.5, 226.0, 217.3, 120.0, 63.0, 47.8, 62.0, 88.8,
        ];
        let spec = vgg(VggVariant::Vgg16, 10);
        let widths = spec.conv_widths();
        assert_eq!(widths, vec![64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]);
        assert_eq!(widths.iter().sum::<usize>(), 4224);
        let total: f64 = width_star.iter().sum();
        assert!((total - 1689.2).abs() < 1e-9, "total {total}");
        for (m, &w) in width_star.iter().zip(&widths) {
            assert!(*m <= w as f64);
        }

        // The rounded widths form a valid keep set the surgery accepts.
        let mut net = build::<f32>(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_network(&mut net, &mut rng);
        let mut keep = ChannelKeepSet::new();
        for (conv, target) in spec.prunable_convs().into_iter().zip(&width_star) {
            let k = (target + 0.5).floor() as usize;
            let weight = net.param(conv, ParamName::Weight).unwrap();
            keep.insert(conv, l1_keep_top_k(weight, k).unwrap());
        }
        let (_, pruned_spec) = surgery(&net, &keep, "vgg16-slimmed").unwrap();
        let new_total: usize = pruned_spec.conv_widths().iter().sum();
        assert_eq!(new_total, width_star.iter().map(|m| (m + 0.5).floor() as usize).sum());
        assert!(new_total < 4224);
    }

    #[test]
    fn uniform_channel_shrinks_widths_by_the_stated_rule() {
        let spec = vgg(VggVariant::Vgg16, 10);
        let pruned = uniform_channel(&spec, 0.25).unwrap();
        assert_eq!(pruned.conv_widths()[0], 48); // 64 -> 48
        assert_eq!(pruned.conv_widths()[12], 384); // 512 -> 384

        assert_eq!(uniform_channel(&spec, 0.0).unwrap(), spec);

        let deep = uniform_channel(&spec, 0.99).unwrap();
        assert!(deep.conv_widths().iter().all(|&w| w >= 1));
        assert!(build::<f32>(&deep).is_ok());
    }

    #[test]
    fn malformed_keep_sets_are_rejected_by_layer() {
        let spec = vgg(VggVariant::VggMini, 10);
        let net = {
            let mut n = build::<f32>(&spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            init_network(&mut n, &mut rng);
            n
        };
        let convs = spec.prunable_convs();

        let mut bad = ChannelKeepSet::new();
        bad.insert(convs[0], vec![]);
        assert!(surgery(&net, &bad, "x").is_err());

        let mut bad = ChannelKeepSet::new();
        bad.insert(convs[0], vec![3, 1]);
        assert!(surgery(&net, &bad, "x").is_err());

        let mut bad = ChannelKeepSet::new();
        bad.insert(convs[0], vec![0, 999]);
        assert!(surgery(&net, &bad, "x").is_err());

        let mut bad = ChannelKeepSet::new();
        bad.insert(convs[0] + 1, vec![0]); // the BN node, not a conv
        match surgery(&net, &bad, "x") {
            Err(PruneError::Inconsistent { layer, .. }) => assert_eq!(layer, convs[0] + 1),
            other => panic!("expected Inconsistent, got {other:?}"),
        }
    }

    #[test]
    fn preresnet_surgery_keeps_shortcuts_intact() {
        let spec = preresnet(20, 10).unwrap();
        let mut net = build::<f32>(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        init_network(&mut net, &mut rng);

        let mut keep = ChannelKeepSet::new();
        for conv in spec.prunable_convs() {
            if let LayerKind::Conv2d { out_channels, .. } = spec.records[conv].kind {
                keep.insert(conv, (0..out_channels / 2).collect());
            }
        }
        let (mut small, small_spec) = surgery(&net, &keep, "thin").unwrap();
        // Block-first convs halved; stage widths at the adds unchanged.
        assert_eq!(
            small_spec.prunable_convs().len(),
            spec.prunable_convs().len()
        );
        let x = random_batch(&mut rng, spec.input_shape, 2);
        let logits = eval_logits(&mut small, &x);
        assert!(logits.iter().all(|v| v.is_finite()));
    }
}
