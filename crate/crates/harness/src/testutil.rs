//! Shared fixtures for the harness unit tests.

use model_zoo::{validate, ArchitectureSpec, Family, LayerRec};
use tensor_core::{LayerKind, Src};

/// A deliberately small conv net (one conv block, ~2.7k parameters at 10
/// classes) that still exercises every training-relevant layer kind.
pub fn tiny_spec(classes: usize) -> ArchitectureSpec {
    let rec = |kind, inputs: Vec<Src>| LayerRec { kind, inputs };
    let spec = ArchitectureSpec {
        family: Family::Vgg,
        name: "tiny".into(),
        input_shape: (3, 32, 32),
        num_classes: classes,
        records: vec![
            rec(
                LayerKind::Conv2d { out_channels: 4, kernel: 3, stride: 1, padding: 1, bias: false },
                vec![Src::Input],
            ),
            rec(LayerKind::BatchNorm { eps: 1e-5, momentum: 0.1 }, vec![Src::Node(0)]),
            rec(LayerKind::Relu, vec![Src::Node(1)]),
            rec(LayerKind::MaxPool { kernel: 4, stride: 4 }, vec![Src::Node(2)]),
            rec(LayerKind::Flatten, vec![Src::Node(3)]),
            rec(LayerKind::Dense { out_features: classes, bias: true }, vec![Src::Node(4)]),
            rec(LayerKind::SoftmaxCrossEntropy, vec![Src::Node(5)]),
        ],
    };
    validate(&spec).expect("tiny spec is well-formed");
    spec
}
