//! Parameter initialization.
//!
//! Convolution and dense weights draw from N(0, 2/fan_in) (He init for ReLU
//! networks); biases and batch-norm shifts start at zero, batch-norm scales
//! at one, running statistics at (0, 1). Draws happen in canonical parameter
//! order from a caller-supplied generator, so a seed pins the whole network.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::layer::{LayerKind, ParamName};
use crate::network::Network;
use crate::scalar::Scalar;

/// Standard deviation of He initialization for the given fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Fan-in of a weight tensor: inputs per output unit.
fn fan_in_of(kind: &LayerKind, shape: &[usize]) -> usize {
    match kind {
        // [C_out, C_in, k, k] → C_in·k².
        LayerKind::Conv2d { .. } => shape[1] * shape[2] * shape[3],
        // [out, in] → in.
        LayerKind::Dense { .. } => shape[1],
        _ => unreachable!("only conv/dense own weight tensors"),
    }
}

/// (Re)initializes every parameter of `net` in place and resets the step
/// counter. Outstanding traces become stale.
pub fn init_network<T: Scalar>(net: &mut Network<T>, rng: &mut impl Rng) {
    let kinds: Vec<LayerKind> = net.nodes().iter().map(|n| n.kind.clone()).collect();
    net.for_each_param_mut(|node, name, tensor| {
        tensor.clear_grad();
        match name {
            ParamName::Weight => {
                let std = he_std(fan_in_of(&kinds[node], tensor.shape()));
                let dist = Normal::new(0.0, std).expect("finite std");
                for v in tensor.data_mut() {
                    *v = T::from_f64(dist.sample(rng));
                }
            }
            ParamName::Bias | ParamName::Beta | ParamName::RunningMean => {
                tensor.data_mut().fill(T::ZERO);
            }
            ParamName::Gamma => tensor.data_mut().fill(T::ONE),
            ParamName::RunningVar => tensor.data_mut().fill(T::ONE),
        }
    });
    net.reset_steps();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{Node, Src};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bn_conv_net() -> Network<f32> {
        let mut conv = Node::new(
            LayerKind::Conv2d { out_channels: 4, kernel: 3, stride: 1, padding: 1, bias: false },
            vec![Src::Input],
        );
        conv.params.push((ParamName::Weight, Tensor::zeros(&[4, 3, 3, 3])));
        let mut bn = Node::new(LayerKind::BatchNorm { eps: 1e-5, momentum: 0.1 }, vec![Src::Node(0)]);
        for name in [ParamName::Gamma, ParamName::Beta, ParamName::RunningMean, ParamName::RunningVar] {
            bn.params.push((name, Tensor::zeros(&[4])));
        }
        let relu = Node::new(LayerKind::Relu, vec![Src::Node(1)]);
        let pool = Node::new(LayerKind::AvgPool { kernel: 4, stride: 4 }, vec![Src::Node(2)]);
        let flat = Node::new(LayerKind::Flatten, vec![Src::Node(3)]);
        let mut dense = Node::new(LayerKind::Dense { out_features: 2, bias: true }, vec![Src::Node(4)]);
        dense.params.push((ParamName::Weight, Tensor::zeros(&[2, 4])));
        dense.params.push((ParamName::Bias, Tensor::zeros(&[2])));
        let loss = Node::new(LayerKind::SoftmaxCrossEntropy, vec![Src::Node(5)]);
        Network::new(vec![conv, bn, relu, pool, flat, dense, loss], (3, 4, 4), 2).unwrap()
    }

    #[test]
    fn he_std_closed_forms() {
        assert!((he_std(2) - 1.0).abs() < 1e-15);
        assert!((he_std(27) - (2.0f64 / 27.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let mut a = bn_conv_net();
        let mut b = bn_conv_net();
        init_network(&mut a, &mut ChaCha8Rng::seed_from_u64(7));
        init_network(&mut b, &mut ChaCha8Rng::seed_from_u64(7));
        let mut same = true;
        a.for_each_param(|i, name, t| {
            let other = b.param(i, name).unwrap();
            if t.data() != other.data() {
                same = false;
            }
        });
        assert!(same);
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = bn_conv_net();
        let mut b = bn_conv_net();
        init_network(&mut a, &mut ChaCha8Rng::seed_from_u64(7));
        init_network(&mut b, &mut ChaCha8Rng::seed_from_u64(8));
        assert_ne!(
            a.param(0, ParamName::Weight).unwrap().data(),
            b.param(0, ParamName::Weight).unwrap().data()
        );
    }

    #[test]
    fn batchnorm_defaults_are_identity() {
        let mut net = bn_conv_net();
        init_network(&mut net, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(net.param(1, ParamName::Gamma).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(net.param(1, ParamName::Beta).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(net.param(1, ParamName::RunningVar).unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(net.steps(), 0);
    }

    #[test]
    fn empirical_std_tracks_he_formula() {
        // 4·3·3·3 = 108 draws is too few; widen the conv for the estimate.
        let mut conv = Node::new(
            LayerKind::Conv2d { out_channels: 512, kernel: 3, stride: 1, padding: 1, bias: false },
            vec![Src::Input],
        );
        conv.params.push((ParamName::Weight, Tensor::<f32>::zeros(&[512, 16, 3, 3])));
        let flat = Node::new(LayerKind::Flatten, vec![Src::Node(0)]);
        let mut dense = Node::new(LayerKind::Dense { out_features: 2, bias: false }, vec![Src::Node(1)]);
        dense.params.push((ParamName::Weight, Tensor::zeros(&[2, 512 * 4])));
        let loss = Node::new(LayerKind::SoftmaxCrossEntropy, vec![Src::Node(2)]);
        let mut net = Network::new(vec![conv, flat, dense, loss], (16, 2, 2), 2).unwrap();
        init_network(&mut net, &mut ChaCha8Rng::seed_from_u64(3));
        let data = net.param(0, ParamName::Weight).unwrap().data();
        let n = data.len() as f64; // 737280 draws
        let mean: f64 = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let want = he_std(16 * 9);
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - want).abs() / want < 0.01, "std {} vs {}", var.sqrt(), want);
    }
}
