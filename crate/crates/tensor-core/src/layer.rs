//! Layer kinds, parameter naming, and graph nodes.
//!
//! A network is a flat list of [`Node`]s wired by index; node `i` may only
//! read the network input or outputs of nodes `j < i`, so the list order is
//! a topological order by construction.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where a node reads its operand(s) from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Src {
    /// The network's input batch.
    Input,
    /// The output of an earlier node.
    Node(usize),
}

/// The operation a node performs. Hyperparameters live here; learned state
/// lives in the node's parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    /// 2-D convolution over `[N, C, H, W]` activations, square kernel.
    Conv2d { out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    /// Per-channel batch normalization with affine scale/shift.
    BatchNorm { eps: f64, momentum: f64 },
    /// Fully connected layer over flattened features.
    Dense { out_features: usize, bias: bool },
    Relu,
    /// Max pooling, no padding.
    MaxPool { kernel: usize, stride: usize },
    /// Average pooling, no padding. Networks in this workspace instantiate it
    /// with `kernel` equal to the current spatial size (global average).
    AvgPool { kernel: usize, stride: usize },
    /// `[C, H, W]` → `C·H·W` feature vector per sample, channel-major order.
    Flatten,
    /// Elementwise sum of two equal-shape activations.
    ResidualAdd,
    /// Fused softmax + mean cross-entropy; must be the final node.
    SoftmaxCrossEntropy,
}

impl LayerKind {
    /// Short tag used in error messages and parameter naming.
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::SoftmaxCrossEntropy => "softmax_xent",
        }
    }
}

/// Names of parameter tensors a node may own, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamName {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamName::Weight => "weight",
            ParamName::Bias => "bias",
            ParamName::Gamma => "gamma",
            ParamName::Beta => "beta",
            ParamName::RunningMean => "running_mean",
            ParamName::RunningVar => "running_var",
        }
    }

    /// Whether SGD updates this tensor. Running statistics are tracked by the
    /// forward pass, never by the optimizer.
    pub fn trainable(&self) -> bool {
        !matches!(self, ParamName::RunningMean | ParamName::RunningVar)
    }
}

/// One operation in the graph together with its owned parameters.
#[derive(Debug, Clone)]
pub struct Node<T: Scalar = f32> {
    pub kind: LayerKind,
    pub inputs: Vec<Src>,
    /// Parameter tensors in canonical order for this kind.
    pub params: Vec<(ParamName, Tensor<T>)>,
}

impl<T: Scalar> Node<T> {
    pub fn new(kind: LayerKind, inputs: Vec<Src>) -> Self {
        Node { kind, inputs, params: Vec::new() }
    }

    pub fn param(&self, name: ParamName) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: ParamName) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

/// Activation shape flowing between nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoShape {
    /// `[C, H, W]` per sample.
    Spatial { c: usize, h: usize, w: usize },
    /// `F` features per sample.
    Flat { f: usize },
    /// A single scalar for the whole batch (the loss).
    Scalar,
}

impl IoShape {
    /// Elements per sample.
    pub fn per_sample(&self) -> usize {
        match *self {
            IoShape::Spatial { c, h, w } => c * h * w,
            IoShape::Flat { f } => f,
            IoShape::Scalar => 1,
        }
    }
}
