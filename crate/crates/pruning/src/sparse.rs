//! Unstructured-mask plumbing: scaled sparse re-initialization, mask-aware
//! training steps, and the uniform Bernoulli sparsifier.
//!
//! Masked training freezes pruned weights at exactly zero: their gradients
//! and momentum slots are cleared before the optimizer step and the weights
//! re-zeroed after it, so the zero set can only be what the mask says. The
//! engine's weight decay cannot move them either (decay of a zero is zero),
//! but the re-zero makes the contract unconditional.
//!
//! Sparse re-initialization draws a layer with keep fraction `k` from
//! `N(0, 2 / (k · fan_in))` — the He rule with fan-in scaled down to the
//! weights that actually remain — then zeroes the masked positions. All
//! positions are drawn even though some are then cleared, so the RNG stream
//! a seed produces does not depend on the mask pattern.

use model_zoo::{build, ArchitectureSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tensor_core::{
    init_network, sgd_step, LayerKind, Network, OptimizerState, ParamName, Scalar,
};

use crate::error::{PruneError, Result};
use crate::mask::{BitMask, PruneMask};

/// Conv node indices of a network, ascending.
fn conv_nodes<T: Scalar>(net: &Network<T>) -> Vec<usize> {
    (0..net.num_nodes())
        .filter(|&i| matches!(net.node(i).kind, LayerKind::Conv2d { .. }))
        .collect()
}

/// Bernoulli(keep = `probability`) mask over every conv weight of `spec`.
pub fn uniform_sparsify(
    spec: &ArchitectureSpec,
    probability: f64,
    seed: u64,
) -> Result<PruneMask> {
    if !(probability > 0.0 && probability <= 1.0) {
        return Err(PruneError::InvalidArg(format!(
            "keep probability must be in (0,1], got {probability}"
        )));
    }
    let net = build::<f32>(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = PruneMask::new();
    for i in conv_nodes(&net) {
        let len = net.param(i, ParamName::Weight).unwrap().len();
        let mut m = BitMask::zeros(len);
        for p in 0..len {
            if rng.gen_bool(probability) {
                m.set(p, true);
            }
        }
        mask.insert(i, m);
    }
    Ok(mask)
}

/// Build and initialize a network whose conv layers follow the sparse He
/// rule for `mask`, with masked positions exactly zero.
pub fn sparse_reinit<T: Scalar>(
    spec: &ArchitectureSpec,
    mask: &PruneMask,
    seed: u64,
) -> Result<Network<T>> {
    let mut net = build::<T>(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_network(&mut net, &mut rng);
    mask.validate_against(&net)?;
    for i in conv_nodes(&net) {
        let m = mask.layer(i).ok_or(PruneError::Inconsistent {
            layer: i,
            detail: "sparse re-init needs a mask for every conv layer".into(),
        })?;
        let k = m.density();
        if k == 0.0 {
            return Err(PruneError::Inconsistent {
                layer: i,
                detail: "layer keeps no weights; cannot scale its initialization".into(),
            });
        }
        let weight = net.param_mut(i, ParamName::Weight).unwrap();
        let fan_in: usize = weight.shape()[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / (k * fan_in as f64)).sqrt())
            .map_err(|e| PruneError::InvalidArg(e.to_string()))?;
        for (p, w) in weight.data_mut().iter_mut().enumerate() {
            let draw = normal.sample(&mut rng);
            *w = if m.get(p) { T::from_f64(draw) } else { T::ZERO };
        }
    }
    Ok(net)
}

/// One SGD step that cannot disturb masked weights: their gradients and
/// momentum are cleared first, and the weights re-zeroed after the update.
pub fn masked_train_step<T: Scalar>(
    net: &mut Network<T>,
    mask: &PruneMask,
    opt: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    mask.validate_against(net)?;
    for (&i, m) in mask.layers() {
        let weight = net.param_mut(i, ParamName::Weight).unwrap();
        if weight.grad().is_some() {
            let grad = weight.grad_mut();
            for p in 0..m.len() {
                if !m.get(p) {
                    grad[p] = T::ZERO;
                }
            }
        }
        if let Some(velocity) = opt.velocity_mut(i, ParamName::Weight) {
            for p in 0..m.len() {
                if !m.get(p) {
                    velocity[p] = T::ZERO;
                }
            }
        }
    }
    sgd_step(net, opt, lr)?;
    for (&i, m) in mask.layers() {
        let weight = net.param_mut(i, ParamName::Weight).unwrap();
        let data = weight.data_mut();
        for p in 0..m.len() {
            if !m.get(p) {
                data[p] = T::ZERO;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use model_zoo::{vgg, Family, LayerRec, VggVariant};
    use tensor_core::{he_std, Mode, Src, Tensor};

    /// conv(3 -> width, 3x3) -> relu -> flatten -> dense -> loss on 2x2 input.
    fn wide_spec(width: usize) -> ArchitectureSpec {
        ArchitectureSpec {
            family: Family::Vgg,
            name: "wide".into(),
            input_shape: (3, 2, 2),
            num_classes: 2,
            records: vec![
                LayerRec {
                    kind: LayerKind::Conv2d {
                        out_channels: width,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                        bias: false,
                    },
                    inputs: vec![Src::Input],
                },
                LayerRec { kind: LayerKind::Relu, inputs: vec![Src::Node(0)] },
                LayerRec { kind: LayerKind::Flatten, inputs: vec![Src::Node(1)] },
                LayerRec {
                    kind: LayerKind::Dense { out_features: 2, bias: true },
                    inputs: vec![Src::Node(2)],
                },
                LayerRec { kind: LayerKind::SoftmaxCrossEntropy, inputs: vec![Src::Node(3)] },
            ],
        }
    }

    fn sample_std(values: impl Iterator<Item = f64>) -> f64 {
        let vs: Vec<f64> = values.collect();
        let n = vs.len() as f64;
        let mean = vs.iter().sum::<f64>() / n;
        (vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn half_kept_layer_draws_at_the_scaled_std() {
        // fan_in 27, keep ~0.5: std should be sqrt(2 / (k·27)) ≈ 0.385.
        let spec = wide_spec(4096);
        let mask = uniform_sparsify(&spec, 0.5, 40).unwrap();
        let net: Network<f32> = sparse_reinit(&spec, &mask, 41).unwrap();
        let m = mask.layer(0).unwrap();
        let w = net.param(0, ParamName::Weight).unwrap();
        let k = m.density();
        let want = (2.0 / (k * 27.0)).sqrt();
        assert!((want - (2.0f64 / 13.5).sqrt()).abs() < 0.01); // k ≈ 0.5
        let got = sample_std(
            w.data()
                .iter()
                .enumerate()
                .filter(|(p, _)| m.get(*p))
                .map(|(_, &v)| v as f64),
        );
        assert!((got - want).abs() / want < 0.01, "std {got} vs {want}");
    }

    #[test]
    fn full_mask_reduces_to_plain_he_initialization() {
        let spec = wide_spec(4096);
        let mask = uniform_sparsify(&spec, 1.0, 0).unwrap();
        assert_eq!(mask.layer(0).unwrap().count_ones(), 4096 * 27);
        let net: Network<f32> = sparse_reinit(&spec, &mask, 42).unwrap();
        let w = net.param(0, ParamName::Weight).unwrap();
        let got = sample_std(w.data().iter().map(|&v| v as f64));
        let want = he_std(27);
        assert!((got - want).abs() / want < 0.01, "std {got} vs {want}");
    }

    #[test]
    fn masked_positions_are_zero_bit_for_bit() {
        let spec = wide_spec(64);
        let mask = uniform_sparsify(&spec, 0.4, 7).unwrap();
        let net: Network<f32> = sparse_reinit(&spec, &mask, 8).unwrap();
        let m = mask.layer(0).unwrap();
        let w = net.param(0, ParamName::Weight).unwrap();
        for (p, &v) in w.data().iter().enumerate() {
            if m.get(p) {
                assert!(v != 0.0);
            } else {
                assert_eq!(v.to_bits(), 0f32.to_bits());
            }
        }
    }

    #[test]
    fn empty_layers_and_missing_layers_are_rejected() {
        let spec = wide_spec(8);
        let mut mask = uniform_sparsify(&spec, 0.5, 1).unwrap();
        *mask.layer_mut(0).unwrap() = BitMask::zeros(8 * 27);
        assert!(matches!(
            sparse_reinit::<f32>(&spec, &mask, 2),
            Err(PruneError::Inconsistent { layer: 0, .. })
        ));
        let empty = PruneMask::new();
        assert!(sparse_reinit::<f32>(&spec, &empty, 2).is_err());
    }

    fn train_batch(seed: u64, spec: &ArchitectureSpec, n: usize) -> (Tensor<f32>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = spec.input_shape;
        let data: Vec<f32> = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        (Tensor::from_vec(&[n, c, h, w], data).unwrap(), labels)
    }

    #[test]
    fn masked_training_never_disturbs_the_zero_set() {
        let spec = wide_spec(16);
        let mask = uniform_sparsify(&spec, 0.7, 21).unwrap();
        let mut net: Network<f32> = sparse_reinit(&spec, &mask, 22).unwrap();
        let mut opt = OptimizerState::new(&net, 0.9, 1e-4).unwrap();
        let (x, y) = train_batch(23, &spec, 8);
        for _ in 0..20 {
            let trace = net.forward(&x, &y, Mode::Train).unwrap();
            net.backward(trace).unwrap();
            masked_train_step(&mut net, &mask, &mut opt, 0.05).unwrap();
        }
        let m = mask.layer(0).unwrap();
        let w = net.param(0, ParamName::Weight).unwrap();
        let zeros = w.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, m.len() - m.count_ones(), "extra or missing zeros");
        for (p, &v) in w.data().iter().enumerate() {
            if !m.get(p) {
                assert_eq!(v.to_bits(), 0f32.to_bits());
            }
        }
    }

    #[test]
    fn all_ones_mask_matches_plain_sgd_bitwise() {
        let spec = wide_spec(8);
        let mask = uniform_sparsify(&spec, 1.0, 0).unwrap();
        let mut a: Network<f32> = sparse_reinit(&spec, &mask, 5).unwrap();
        let mut b = a.clone();
        let mut opt_a = OptimizerState::new(&a, 0.9, 1e-4).unwrap();
        let mut opt_b = OptimizerState::new(&b, 0.9, 1e-4).unwrap();
        let (x, y) = train_batch(6, &spec, 4);
        for _ in 0..3 {
            let ta = a.forward(&x, &y, Mode::Train).unwrap();
            a.backward(ta).unwrap();
            masked_train_step(&mut a, &mask, &mut opt_a, 0.1).unwrap();
            let tb = b.forward(&x, &y, Mode::Train).unwrap();
            b.backward(tb).unwrap();
            sgd_step(&mut b, &mut opt_b, 0.1).unwrap();
        }
        let wa = a.param(0, ParamName::Weight).unwrap().data();
        let wb = b.param(0, ParamName::Weight).unwrap().data();
        assert!(wa.iter().zip(wb).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn bernoulli_density_lands_within_three_sigma() {
        let spec = vgg(VggVariant::VggMini, 10);
        let mask = uniform_sparsify(&spec, 0.3, 77).unwrap();
        let n = mask.total_bits() as f64;
        assert!(n > 1e5);
        let sigma = (0.3 * 0.7 / n).sqrt();
        assert!((mask.density() - 0.3).abs() < 3.0 * sigma, "density {}", mask.density());

        assert_eq!(uniform_sparsify(&spec, 0.3, 77).unwrap(), mask);
        assert_ne!(uniform_sparsify(&spec, 0.3, 78).unwrap(), mask);
        assert!(uniform_sparsify(&spec, 0.0, 1).is_err());
        assert!(uniform_sparsify(&spec, 1.1, 1).is_err());
    }
}
