//! Selection criteria: which filters, channels or weights survive.
//!
//! Every selection here is deterministic and oracle-checkable:
//!
//! - counts derive from ratios by exact arithmetic with a tiny snap-to-integer
//!   guard, so `ratio = 1/3` of 3 filters behaves as the rational it denotes;
//! - ties are broken by stable order with the **lower index kept**, pooled
//!   entries ordered lexicographically by (layer, position).
//!
//! The criteria themselves: per-layer L1-norm filter ranking, global
//! batch-norm-scale thresholding (network slimming, with its L1 subgradient
//! penalty), global/per-layer weight-magnitude masks, and soft filter pruning
//! which zeroes filters during training without a persistent mask.

use std::collections::BTreeMap;

use model_zoo::describe;
use serde::{Deserialize, Serialize};
use tensor_core::{LayerKind, Network, ParamName, Scalar, Tensor};

use crate::error::{PruneError, Result};
use crate::mask::{BitMask, PruneMask};

// ---------------------------------------------------------------------------
// Count arithmetic
// ---------------------------------------------------------------------------

/// Ratios arrive as f64 but denote rationals; values this close to an integer
/// are treated as that integer before flooring/ceiling so counts never drift
/// off by one from float error.
const COUNT_EPS: f64 = 1e-6;

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < COUNT_EPS {
        r
    } else {
        x
    }
}

pub(crate) fn floor_count(x: f64) -> usize {
    snap(x).floor() as usize
}

pub(crate) fn ceil_count(x: f64) -> usize {
    snap(x).ceil() as usize
}

/// Round half-up, with the same guard on the half boundary.
pub(crate) fn round_half_up_count(x: f64) -> usize {
    (x + 0.5 + COUNT_EPS).floor() as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) || !ratio.is_finite() {
        return Err(PruneError::InvalidArg(format!("ratio must be in [0,1), got {ratio}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// L1 filter ranking
// ---------------------------------------------------------------------------

/// Per-filter L1 norms of a conv weight `[C_out, C_in, k, k]`, summed in f64.
pub fn filter_l1_norms<T: Scalar>(weight: &Tensor<T>) -> Vec<f64> {
    let c_out = weight.shape()[0];
    let per = weight.len() / c_out.max(1);
    weight
        .data()
        .chunks_exact(per)
        .map(|f| f.iter().map(|w| w.to_f64().abs()).sum())
        .collect()
}

/// Indices of the `k` filters with largest L1 norm, ascending; ties keep the
/// lower index.
pub fn l1_keep_top_k<T: Scalar>(weight: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    let norms = filter_l1_norms(weight);
    if k == 0 || k > norms.len() {
        return Err(PruneError::InvalidArg(format!(
            "keep count {k} out of range for {} filters",
            norms.len()
        )));
    }
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Keep the `⌈(1-ratio)·C_out⌉` largest-L1 filters.
pub fn l1_filter_select<T: Scalar>(weight: &Tensor<T>, ratio: f64) -> Result<Vec<usize>> {
    check_ratio(ratio)?;
    let c_out = weight.shape()[0];
    l1_keep_top_k(weight, ceil_count((1.0 - ratio) * c_out as f64))
}

// ---------------------------------------------------------------------------
// Network slimming
// ---------------------------------------------------------------------------

/// Slimming hyperparameters: the per-step L1 penalty on BN scales and the
/// global fraction of channels to prune afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlimmingConfig {
    pub lambda: f64,
    pub ratio: f64,
}

impl SlimmingConfig {
    pub fn new(lambda: f64, ratio: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(PruneError::InvalidArg(format!("lambda must be >= 0, got {lambda}")));
        }
        check_ratio(ratio)?;
        Ok(SlimmingConfig { lambda, ratio })
    }
}

/// Add the subgradient of `λ·Σ|γ|` to the scale gradients of the given BN
/// nodes; call between `backward` and the optimizer step. `sign(0)` is 0.
pub fn slimming_penalty<T: Scalar>(
    net: &mut Network<T>,
    lambda: f64,
    bn_nodes: &[usize],
) -> Result<()> {
    for &bn in bn_nodes {
        if !matches!(net.node(bn).kind, LayerKind::BatchNorm { .. }) {
            return Err(PruneError::Inconsistent {
                layer: bn,
                detail: "slimming penalty targets a non-BN node".into(),
            });
        }
        let gamma = net
            .param_mut(bn, ParamName::Gamma)
            .ok_or_else(|| PruneError::Inconsistent { layer: bn, detail: "BN has no scale".into() })?;
        let values: Vec<f64> = gamma.data().iter().map(|g| g.to_f64()).collect();
        let grad = gamma.grad_mut();
        for (g, v) in grad.iter_mut().zip(values) {
            let s = if v > 0.0 {
                lambda
            } else if v < 0.0 {
                -lambda
            } else {
                0.0
            };
            *g = T::from_f64(g.to_f64() + s);
        }
    }
    Ok(())
}

/// Gather `|γ|` per prunable conv (from its governing BN), keyed by conv node.
pub fn slimming_gammas<T: Scalar>(
    net: &Network<T>,
    spec: &model_zoo::ArchitectureSpec,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for conv in spec.prunable_convs() {
        let bn = spec.governing_bn(conv).ok_or(PruneError::Inconsistent {
            layer: conv,
            detail: "prunable conv has no governing BN".into(),
        })?;
        let gamma = net.param(bn, ParamName::Gamma).ok_or(PruneError::Inconsistent {
            layer: bn,
            detail: "governing BN has no scale".into(),
        })?;
        out.insert(conv, gamma.data().iter().map(|g| g.to_f64().abs()).collect());
    }
    Ok(out)
}

/// Global channel selection by BN-scale magnitude.
///
/// Prunes the `⌊ratio·total⌋` smallest `|γ|` across all layers pooled
/// together (ties keep the lower (layer, channel)), then re-admits the
/// largest-`|γ|` channel of any layer that emptied, so every layer keeps at
/// least one channel.
pub fn slimming_select(
    gammas: &BTreeMap<usize, Vec<f64>>,
    ratio: f64,
) -> Result<crate::surgery::ChannelKeepSet> {
    check_ratio(ratio)?;
    let total: usize = gammas.values().map(Vec::len).sum();
    if total == 0 {
        return Err(PruneError::InvalidArg("no channels to select from".into()));
    }
    let prune_target = floor_count(ratio * total as f64);

    // Pool (|γ|, layer, channel); sort so the pruned prefix takes equal
    // magnitudes from the highest (layer, channel) first, keeping low indices.
    let mut pooled: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (&layer, gs) in gammas {
        for (ch, g) in gs.iter().enumerate() {
            pooled.push((g.abs(), layer, ch));
        }
    }
    pooled.sort_by(|a, b| {
        a.0.total_cmp(&b.0).then_with(|| (b.1, b.2).cmp(&(a.1, a.2)))
    });

    let mut kept: BTreeMap<usize, Vec<bool>> =
        gammas.iter().map(|(&l, gs)| (l, vec![true; gs.len()])).collect();
    for &(_, layer, ch) in &pooled[..prune_target] {
        kept.get_mut(&layer).unwrap()[ch] = false;
    }

    // Floor rule: an emptied layer re-admits channels in descending |γ|.
    let mut keep_set = crate::surgery::ChannelKeepSet::new();
    for (&layer, flags) in &kept {
        let mut indices: Vec<usize> =
            flags.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
        if indices.is_empty() {
            let gs = &gammas[&layer];
            let best = (0..gs.len())
                .max_by(|&a, &b| gs[a].abs().total_cmp(&gs[b].abs()).then(b.cmp(&a)))
                .expect("layer has channels");
            indices.push(best);
        }
        keep_set.insert(layer, indices);
    }
    Ok(keep_set)
}

// ---------------------------------------------------------------------------
// Magnitude masks
// ---------------------------------------------------------------------------

/// Whether the magnitude quantile pools all conv weights or works per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MagnitudeScope {
    Global,
    PerLayer,
}

/// Unstructured magnitude pruning over every conv weight in the network
/// (1x1 shortcut convs included; dense layers excluded).
pub fn magnitude_mask<T: Scalar>(
    net: &Network<T>,
    ratio: f64,
    scope: MagnitudeScope,
) -> Result<PruneMask> {
    check_ratio(ratio)?;
    let convs: Vec<usize> = (0..net.num_nodes())
        .filter(|&i| matches!(net.node(i).kind, LayerKind::Conv2d { .. }))
        .collect();
    let mut mask = PruneMask::new();
    for &i in &convs {
        mask.insert(i, BitMask::ones(net.param(i, ParamName::Weight).unwrap().len()));
    }
    match scope {
        MagnitudeScope::PerLayer => {
            for &i in &convs {
                let weight = net.param(i, ParamName::Weight).unwrap();
                let n = weight.len();
                let prune = floor_count(ratio * n as f64);
                let mut order: Vec<usize> = (0..n).collect();
                let data = weight.data();
                order.sort_by(|&a, &b| {
                    data[a].to_f64().abs().total_cmp(&data[b].to_f64().abs()).then(b.cmp(&a))
                });
                let layer = mask.layer_mut(i).unwrap();
                for &p in &order[..prune] {
                    layer.set(p, false);
                }
            }
        }
        MagnitudeScope::Global => {
            let mut pooled: Vec<(f64, usize, usize)> = Vec::new();
            for &i in &convs {
                let data = net.param(i, ParamName::Weight).unwrap().data();
                pooled.extend(data.iter().enumerate().map(|(p, w)| (w.to_f64().abs(), i, p)));
            }
            let prune = floor_count(ratio * pooled.len() as f64);
            pooled.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| (b.1, b.2).cmp(&(a.1, a.2))));
            for &(_, i, p) in &pooled[..prune] {
                mask.layer_mut(i).unwrap().set(p, false);
            }
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Soft filter pruning
// ---------------------------------------------------------------------------

/// Soft filter pruning: the zeroed-every-epoch flavor with no persistent mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SfpConfig {
    pub ratio: f64,
}

impl SfpConfig {
    pub fn new(ratio: f64) -> Result<Self> {
        check_ratio(ratio)?;
        Ok(SfpConfig { ratio })
    }
}

/// Zero the smallest-L1 fraction of filters in every prunable conv.
///
/// Called at each epoch end. The filter's weights (and bias entry, if any)
/// are set to zero; the layer's BN stays untouched and no mask is recorded,
/// so the zeroed filters keep receiving gradient and may grow back.
pub fn soft_filter_prune_epoch<T: Scalar>(net: &mut Network<T>, cfg: &SfpConfig) -> Result<()> {
    let spec = describe(net, "sfp");
    for conv in spec.prunable_convs() {
        let kept = l1_filter_select(net.param(conv, ParamName::Weight).unwrap(), cfg.ratio)?;
        let keep: std::collections::BTreeSet<usize> = kept.into_iter().collect();
        let weight = net.param_mut(conv, ParamName::Weight).unwrap();
        let c_out = weight.shape()[0];
        let per = weight.len() / c_out;
        for f in 0..c_out {
            if !keep.contains(&f) {
                weight.data_mut()[f * per..(f + 1) * per].fill(T::ZERO);
            }
        }
        if let Some(bias) = net.param_mut(conv, ParamName::Bias) {
            for f in 0..c_out {
                if !keep.contains(&f) {
                    bias.data_mut()[f] = T::ZERO;
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weight_from(norms: &[f64]) -> Tensor<f32> {
        // One 1x1x1 filter per norm so the L1 norm equals the value.
        let data: Vec<f32> = norms.iter().map(|&n| n as f32).collect();
        Tensor::from_vec(&[norms.len(), 1, 1, 1], data).unwrap()
    }

    #[test]
    fn keeps_the_largest_norm_filters() {
        let w = weight_from(&[3.0, 1.0, 2.0]);
        assert_eq!(l1_filter_select(&w, 1.0 / 3.0).unwrap(), vec![0, 2]);
        assert_eq!(l1_filter_select(&w, 0.0).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn ties_keep_the_lower_filter_index() {
        let w = weight_from(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(l1_filter_select(&w, 0.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn matches_a_sort_and_take_oracle_on_random_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..64 * 3 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Tensor::from_vec(&[64, 3, 3, 3], data).unwrap();
        let kept = l1_filter_select(&w, 0.4).unwrap();

        let norms = filter_l1_norms(&w);
        let mut order: Vec<usize> = (0..64).collect();
        order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
        let want_k = (0.6f64 * 64.0).ceil() as usize;
        let mut want = order[..want_k].to_vec();
        want.sort_unstable();
        assert_eq!(kept, want);
    }

    #[test]
    fn slimming_clear_separation_prunes_the_small_scales() {
        let gammas = BTreeMap::from([(2, vec![0.5, 0.01]), (6, vec![0.3, 0.02])]);
        let keep = slimming_select(&gammas, 0.5).unwrap();
        assert_eq!(keep.layers[&2], vec![0]);
        assert_eq!(keep.layers[&6], vec![0]);
    }

    #[test]
    fn slimming_floor_readmits_the_best_channel_of_an_emptied_layer() {
        // Layer 9's scales are all below layer 4's, so ratio 0.5 would empty it.
        let gammas = BTreeMap::from([(4, vec![0.9, 0.8]), (9, vec![0.001, 0.002])]);
        let keep = slimming_select(&gammas, 0.5).unwrap();
        assert_eq!(keep.layers[&4], vec![0, 1]);
        assert_eq!(keep.layers[&9], vec![1]); // largest |γ| wins re-admission
    }

    #[test]
    fn slimming_matches_the_pooled_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gammas = BTreeMap::new();
        let sizes = [40, 30, 50, 20, 35, 25];
        for (layer, &n) in sizes.iter().enumerate() {
            gammas.insert(layer * 3, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f64>>());
        }
        let keep = slimming_select(&gammas, 0.6).unwrap();

        let mut pooled: Vec<(f64, usize, usize)> = gammas
            .iter()
            .flat_map(|(&l, gs)| gs.iter().enumerate().map(move |(c, &g)| (g, l, c)))
            .collect();
        pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
        let prune = (0.6f64 * 200.0).floor() as usize;
        let pruned: std::collections::BTreeSet<(usize, usize)> =
            pooled[..prune].iter().map(|&(_, l, c)| (l, c)).collect();
        for (&l, gs) in &gammas {
            let want: Vec<usize> =
                (0..gs.len()).filter(|&c| !pruned.contains(&(l, c))).collect();
            // No layer empties in this draw, so the floor never fires.
            assert!(!want.is_empty());
            assert_eq!(keep.layers[&l], want, "layer {l}");
        }
        let total_kept: usize = keep.layers.values().map(Vec::len).sum();
        assert_eq!(total_kept, 200 - prune);
    }

    #[test]
    fn slimming_kept_set_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gammas: BTreeMap<usize, Vec<f64>> = (0..4)
            .map(|l| (l, (0..30).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect();
        let scaled: BTreeMap<usize, Vec<f64>> =
            gammas.iter().map(|(&l, gs)| (l, gs.iter().map(|g| g * 17.5).collect())).collect();
        assert_eq!(
            slimming_select(&gammas, 0.4).unwrap().layers,
            slimming_select(&scaled, 0.4).unwrap().layers
        );
    }

    #[test]
    fn magnitude_keeps_the_large_weights() {
        // Weights [.1, -.4, .3, .05] as a single conv layer; ratio .5 keeps two.
        let net = tiny_net(&[0.1, -0.4, 0.3, 0.05]);
        let mask = magnitude_mask(&net, 0.5, MagnitudeScope::Global).unwrap();
        let m = mask.layer(0).unwrap();
        assert_eq!(
            (0..4).map(|i| m.get(i)).collect::<Vec<_>>(),
            vec![false, true, true, false]
        );
        let all = magnitude_mask(&net, 0.0, MagnitudeScope::Global).unwrap();
        assert_eq!(all.layer(0).unwrap().count_ones(), 4);
    }

    /// One conv (4 channels of 1x1x1 weights) + head, for mask tests.
    fn tiny_net(weights: &[f32]) -> Network<f32> {
        use model_zoo::{ArchitectureSpec, Family, LayerRec};
        use tensor_core::Src;
        let spec = ArchitectureSpec {
            family: Family::Vgg,
            name: "tiny".into(),
            input_shape: (1, 1, 1),
            num_classes: 2,
            records: vec![
                LayerRec {
                    kind: LayerKind::Conv2d {
                        out_channels: weights.len(),
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                        bias: false,
                    },
                    inputs: vec![Src::Input],
                },
                LayerRec { kind: LayerKind::Flatten, inputs: vec![Src::Node(0)] },
                LayerRec {
                    kind: LayerKind::Dense { out_features: 2, bias: true },
                    inputs: vec![Src::Node(1)],
                },
                LayerRec { kind: LayerKind::SoftmaxCrossEntropy, inputs: vec![Src::Node(2)] },
            ],
        };
        let mut net = model_zoo::build::<f32>(&spec).unwrap();
        let w = net.param_mut(0, ParamName::Weight).unwrap();
        w.data_mut().copy_from_slice(weights);
        net
    }

    #[test]
    fn global_magnitude_matches_the_pooled_oracle_across_layers() {
        let spec = model_zoo::vgg(model_zoo::VggVariant::VggMini, 10);
        let mut net = model_zoo::build::<f32>(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        tensor_core::init_network(&mut net, &mut rng);
        let ratio = 0.37;
        let mask = magnitude_mask(&net, ratio, MagnitudeScope::Global).unwrap();

        let mut pooled: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..net.num_nodes() {
            if matches!(net.node(i).kind, LayerKind::Conv2d { .. }) {
                let data = net.param(i, ParamName::Weight).unwrap().data();
                pooled.extend(data.iter().enumerate().map(|(p, w)| (w.abs() as f64, i, p)));
            }
        }
        let total = pooled.len();
        pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
        let prune = (ratio * total as f64).floor() as usize;
        assert_eq!(mask.kept_bits(), total - prune);
        for &(_, i, p) in &pooled[..prune] {
            assert!(!mask.layer(i).unwrap().get(p));
        }
        for &(_, i, p) in &pooled[prune..] {
            assert!(mask.layer(i).unwrap().get(p));
        }
    }

    #[test]
    fn per_layer_magnitude_prunes_each_layer_independently() {
        let spec = model_zoo::vgg(model_zoo::VggVariant::VggMini, 10);
        let mut net = model_zoo::build::<f32>(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        tensor_core::init_network(&mut net, &mut rng);
        let mask = magnitude_mask(&net, 0.5, MagnitudeScope::PerLayer).unwrap();
        for (&i, m) in mask.layers() {
            let n = net.param(i, ParamName::Weight).unwrap().len();
            assert_eq!(m.count_ones(), n - n / 2, "layer {i}");
        }
    }

    #[test]
    fn sfp_zeroes_smallest_filters_but_keeps_bn() {
        let spec = model_zoo::vgg(model_zoo::VggVariant::VggMini, 10);
        let mut net = model_zoo::build::<f32>(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        tensor_core::init_network(&mut net, &mut rng);
        let before_gamma: Vec<f32> =
            net.param(1, ParamName::Gamma).unwrap().data().to_vec();

        soft_filter_prune_epoch(&mut net, &SfpConfig::new(0.3).unwrap()).unwrap();

        let spec = describe(&net, "x");
        for conv in spec.prunable_convs() {
            let w = net.param(conv, ParamName::Weight).unwrap();
            let c_out = w.shape()[0];
            let per = w.len() / c_out;
            let zeroed = (0..c_out)
                .filter(|&f| w.data()[f * per..(f + 1) * per].iter().all(|&x| x == 0.0))
                .count();
            assert_eq!(zeroed, c_out - ((0.7 * c_out as f64).ceil() as usize), "conv {conv}");
        }
        assert_eq!(net.param(1, ParamName::Gamma).unwrap().data(), &before_gamma[..]);
    }

    #[test]
    fn ratio_bounds_are_enforced() {
        let w = weight_from(&[1.0, 2.0]);
        assert!(l1_filter_select(&w, 1.0).is_err());
        assert!(l1_filter_select(&w, -0.1).is_err());
        assert!(SlimmingConfig::new(-1e-4, 0.5).is_err());
        assert!(SlimmingConfig::new(1e-4, 1.0).is_err());
        assert!(SfpConfig::new(1.0).is_err());
    }

    #[test]
    fn count_arithmetic_survives_rational_ratios() {
        // (1 - 1/3)·3 lands at 2.0000000000000004 in f64; ceil must say 2.
        assert_eq!(ceil_count((1.0 - 1.0 / 3.0) * 3.0), 2);
        assert_eq!(floor_count(0.6 * 200.0), 120);
        assert_eq!(round_half_up_count(0.7 * 5.0), 4);
        assert_eq!(round_half_up_count(3.4), 3);
    }

    proptest::proptest! {
        #[test]
        fn l1_selection_always_matches_the_oracle(
            seed in 0u64..500,
            c_out in 2usize..32,
            ratio in 0.0f64..0.95,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..c_out * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = Tensor::from_vec(&[c_out, 2, 2, 2], data).unwrap();
            let kept = l1_filter_select(&w, ratio).unwrap();

            let norms = filter_l1_norms(&w);
            let mut order: Vec<usize> = (0..c_out).collect();
            order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
            let k = ceil_count((1.0 - ratio) * c_out as f64);
            let mut want = order[..k].to_vec();
            want.sort_unstable();
            proptest::prop_assert_eq!(kept, want);
        }
    }
}
