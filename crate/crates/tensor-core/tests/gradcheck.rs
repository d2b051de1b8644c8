//! End-to-end gradient verification on a network that exercises every layer
//! kind at once: convolution (padded, strided), batch norm, ReLU, residual
//! addition, both pooling flavors, flatten, dense, and the softmax loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor_core::{
    finite_diff_check, init_network, param_template, sgd_step, FdOptions, IoShape, LayerKind,
    Mode, Network, Node, OptimizerState, Scalar, Src, Tensor,
};

/// Builds a node with zeroed parameter tensors sized from the template.
fn node<T: Scalar>(kind: LayerKind, inputs: Vec<Src>, in_shape: IoShape) -> Node<T> {
    let mut n = Node::new(kind, inputs);
    for (name, shape) in param_template(&n.kind, &in_shape).unwrap() {
        n.params.push((name, Tensor::zeros(&shape)));
    }
    n
}

/// Residual block + downsampling tail; ~600 parameters, 3 classes.
fn kitchen_sink<T: Scalar>() -> Network<T> {
    let sp = |c, h, w| IoShape::Spatial { c, h, w };
    let conv = |o| LayerKind::Conv2d { out_channels: o, kernel: 3, stride: 1, padding: 1, bias: false };
    let bn = LayerKind::BatchNorm { eps: 1e-5, momentum: 0.1 };
    let nodes: Vec<Node<T>> = vec![
        node(conv(4), vec![Src::Input], sp(2, 8, 8)),
        node(bn.clone(), vec![Src::Node(0)], sp(4, 8, 8)),
        node(LayerKind::Relu, vec![Src::Node(1)], sp(4, 8, 8)),
        node(conv(4), vec![Src::Node(2)], sp(4, 8, 8)),
        node(bn.clone(), vec![Src::Node(3)], sp(4, 8, 8)),
        node(LayerKind::Relu, vec![Src::Node(4)], sp(4, 8, 8)),
        node(conv(4), vec![Src::Node(5)], sp(4, 8, 8)),
        node(LayerKind::ResidualAdd, vec![Src::Node(6), Src::Node(2)], sp(4, 8, 8)),
        node(LayerKind::MaxPool { kernel: 2, stride: 2 }, vec![Src::Node(7)], sp(4, 8, 8)),
        node(
            LayerKind::Conv2d { out_channels: 6, kernel: 3, stride: 2, padding: 1, bias: true },
            vec![Src::Node(8)],
            sp(4, 4, 4),
        ),
        node(LayerKind::Relu, vec![Src::Node(9)], sp(6, 2, 2)),
        node(LayerKind::AvgPool { kernel: 2, stride: 2 }, vec![Src::Node(10)], sp(6, 2, 2)),
        node(LayerKind::Flatten, vec![Src::Node(11)], sp(6, 1, 1)),
        node(LayerKind::Dense { out_features: 3, bias: true }, vec![Src::Node(12)], IoShape::Flat { f: 6 }),
        node(LayerKind::SoftmaxCrossEntropy, vec![Src::Node(13)], IoShape::Flat { f: 3 }),
    ];
    Network::new(nodes, (2, 8, 8), 3).unwrap()
}

fn batch<T: Scalar>(n: usize) -> (Tensor<T>, Vec<usize>) {
    let len = n * 2 * 8 * 8;
    let data: Vec<T> = (0..len)
        .map(|i| T::from_f64((((i * 37 + 11) % 83) as f64) / 41.5 - 1.0))
        .collect();
    let labels = (0..n).map(|s| s % 3).collect();
    (Tensor::from_vec(&[n, 2, 8, 8], data).unwrap(), labels)
}

#[test]
fn every_layer_kind_passes_finite_difference() {
    let mut net = kitchen_sink::<f64>();
    init_network(&mut net, &mut ChaCha8Rng::seed_from_u64(42));
    let (x, labels) = batch::<f64>(3);
    let report = finite_diff_check(&net, &x, &labels, &FdOptions::default()).unwrap();
    assert!(
        report.pass(),
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
    assert!(report.checked > 600, "expected a full sweep, checked {}", report.checked);
}

#[test]
fn corrupted_backward_is_detected_on_the_full_network() {
    let mut net = kitchen_sink::<f64>();
    init_network(&mut net, &mut ChaCha8Rng::seed_from_u64(42));
    let (x, labels) = batch::<f64>(3);
    let opts = FdOptions { grad_scale: 2.0, max_checks_per_tensor: 5, ..FdOptions::default() };
    let report = finite_diff_check(&net, &x, &labels, &opts).unwrap();
    assert!(!report.pass());
}

#[test]
fn training_loop_is_bitwise_reproducible() {
    let run = || -> Vec<u32> {
        let mut net = kitchen_sink::<f32>();
        init_network(&mut net, &mut ChaCha8Rng::seed_from_u64(9));
        let mut opt = OptimizerState::new(&net, 0.9, 1e-4).unwrap();
        let (x, labels) = batch::<f32>(4);
        for _ in 0..5 {
            let tr = net.forward(&x, &labels, Mode::Train).unwrap();
            net.backward(tr).unwrap();
            sgd_step(&mut net, &mut opt, 0.05).unwrap();
        }
        let mut bits = Vec::new();
        net.for_each_param(|_, _, t| bits.extend(t.data().iter().map(|v| v.to_bits())));
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn training_reduces_loss_on_a_memorizable_batch() {
    let mut net = kitchen_sink::<f32>();
    init_network(&mut net, &mut ChaCha8Rng::seed_from_u64(1));
    let mut opt = OptimizerState::new(&net, 0.9, 0.0).unwrap();
    let (x, labels) = batch::<f32>(6);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..40 {
        let tr = net.forward(&x, &labels, Mode::Train).unwrap();
        last = tr.loss();
        first.get_or_insert(last);
        net.backward(tr).unwrap();
        sgd_step(&mut net, &mut opt, 0.05).unwrap();
    }
    let first = first.unwrap();
    assert!(last < first * 0.5, "loss {first} -> {last} did not halve");
}

#[test]
fn eval_mode_uses_running_statistics() {
    // With default running stats (0, 1) and gamma = 1, eval batch norm is an
    // identity map; doubling gamma doubles the normalized output.
    let mut net = kitchen_sink::<f64>();
    init_network(&mut net, &mut ChaCha8Rng::seed_from_u64(4));
    let (x, labels) = batch::<f64>(2);
    let a = net.forward(&x, &labels, Mode::Eval).unwrap().logits().clone();
    // Train once: running stats move, eval output must change.
    let tr = net.forward(&x, &labels, Mode::Train).unwrap();
    drop(tr);
    let b = net.forward(&x, &labels, Mode::Eval).unwrap().logits().clone();
    assert_ne!(a.data(), b.data());
}
