//! Serializable architecture descriptions.
//!
//! An [`ArchitectureSpec`] mirrors an engine network record-for-record: spec
//! record `i` becomes graph node `i`, so channel keep-sets and weight masks
//! can be keyed by a single index space. Stage membership and prunability
//! are *derived* from structure (never stored), which keeps
//! `describe(build(spec)) == spec` exact.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use tensor_core::{param_template, LayerKind, Network, Node, Scalar, Src, Tensor};

use crate::error::{Result, ZooError};

/// Architecture family, used for naming and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Vgg,
    PreResNet,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Vgg => "vgg",
            Family::PreResNet => "preresnet",
        }
    }
}

/// One layer record; indices into `records` double as engine node indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRec {
    pub kind: LayerKind,
    pub inputs: Vec<Src>,
}

/// A complete, buildable network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub name: String,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub records: Vec<LayerRec>,
}

impl ArchitectureSpec {
    /// Record indices of all convolution layers, in graph order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| matches!(r.kind, LayerKind::Conv2d { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Output channel counts of all convolution layers, in graph order.
    pub fn conv_widths(&self) -> Vec<usize> {
        self.records
            .iter()
            .filter_map(|r| match r.kind {
                LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
                _ => None,
            })
            .collect()
    }

    /// Record indices that consume node `i`'s output.
    pub fn consumers(&self, i: usize) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.inputs.contains(&Src::Node(i)))
            .map(|(j, _)| j)
            .collect()
    }

    /// Convolutions whose output channels may be pruned: every consumer is a
    /// batch norm. This covers all VGG convolutions and exactly the first
    /// convolution of each residual block (stem, block-second, and shortcut
    /// convolutions all feed a residual join somewhere, so they are kept at
    /// full width and residual shapes stay consistent).
    pub fn prunable_convs(&self) -> Vec<usize> {
        self.conv_layers()
            .into_iter()
            .filter(|&i| {
                let cons = self.consumers(i);
                !cons.is_empty()
                    && cons
                        .iter()
                        .all(|&j| matches!(self.records[j].kind, LayerKind::BatchNorm { .. }))
            })
            .collect()
    }

    /// The batch norm that scales a prunable convolution's output channels.
    pub fn governing_bn(&self, conv: usize) -> Option<usize> {
        let cons = self.consumers(conv);
        match cons.as_slice() {
            [j] if matches!(self.records[*j].kind, LayerKind::BatchNorm { .. }) => Some(*j),
            _ => None,
        }
    }
}

/// Spatial height of each record's output (flat records carry `None`).
fn output_heights(spec: &ArchitectureSpec) -> Result<Vec<Option<usize>>> {
    let mut heights: Vec<Option<usize>> = Vec::with_capacity(spec.records.len());
    for (i, rec) in spec.records.iter().enumerate() {
        let input_h = |src: &Src| -> Result<Option<usize>> {
            match src {
                Src::Input => Ok(Some(spec.input_shape.1)),
                Src::Node(j) if *j < i => Ok(heights[*j]),
                Src::Node(j) => Err(ZooError::BadSpec(format!(
                    "record {i} reads record {j}, which is not earlier"
                ))),
            }
        };
        let h_in = match rec.inputs.first() {
            Some(src) => input_h(src)?,
            None => return Err(ZooError::BadSpec(format!("record {i} has no inputs"))),
        };
        let h = match &rec.kind {
            LayerKind::Conv2d { kernel, stride, padding, .. } => {
                let h = h_in.ok_or_else(|| spatial_err(i))?;
                Some((h + 2 * padding - kernel) / stride + 1)
            }
            LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                let h = h_in.ok_or_else(|| spatial_err(i))?;
                Some((h - kernel) / stride + 1)
            }
            LayerKind::BatchNorm { .. } | LayerKind::Relu | LayerKind::ResidualAdd => h_in,
            LayerKind::Flatten | LayerKind::Dense { .. } | LayerKind::SoftmaxCrossEntropy => None,
        };
        heights.push(h);
    }
    Ok(heights)
}

fn spatial_err(i: usize) -> ZooError {
    ZooError::BadSpec(format!("record {i} expects a spatial input"))
}

/// Stage id per convolution layer, keyed by record index.
///
/// Stages partition the convolutions at spatial-downsampling points: a
/// convolution's stage is the rank of its output resolution among all
/// convolution output resolutions (largest = stage 0). A convolution that
/// halves the resolution therefore opens the next stage.
pub fn stages_of(spec: &ArchitectureSpec) -> Result<BTreeMap<usize, usize>> {
    let heights = output_heights(spec)?;
    let mut sizes: Vec<usize> = Vec::new();
    let convs = spec.conv_layers();
    for &i in &convs {
        let h = heights[i].ok_or_else(|| spatial_err(i))?;
        if !sizes.contains(&h) {
            sizes.push(h);
        }
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let mut out = BTreeMap::new();
    for &i in &convs {
        let h = heights[i].unwrap();
        out.insert(i, sizes.iter().position(|&s| s == h).unwrap());
    }
    Ok(out)
}

/// Number of convolutions per stage, in stage order.
pub fn stage_sizes(spec: &ArchitectureSpec) -> Result<Vec<usize>> {
    let stages = stages_of(spec)?;
    let count = stages.values().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; count];
    for (_, s) in stages {
        sizes[s] += 1;
    }
    Ok(sizes)
}

/// Instantiates the spec as an engine network with zeroed parameters.
/// Record `i` becomes node `i`.
pub fn build<T: Scalar>(spec: &ArchitectureSpec) -> Result<Network<T>> {
    // Infer each record's input shape to size parameter tensors; the engine
    // re-validates everything on construction.
    let mut shapes: Vec<tensor_core::IoShape> = Vec::with_capacity(spec.records.len());
    let mut nodes: Vec<Node<T>> = Vec::with_capacity(spec.records.len());
    let (c, h, w) = spec.input_shape;
    let input_io = tensor_core::IoShape::Spatial { c, h, w };
    for (i, rec) in spec.records.iter().enumerate() {
        let in_shape = match rec.inputs.first() {
            Some(Src::Input) => input_io,
            Some(Src::Node(j)) if *j < i => shapes[*j],
            _ => return Err(ZooError::BadSpec(format!("record {i} has invalid inputs"))),
        };
        let mut node = Node::new(rec.kind.clone(), rec.inputs.clone());
        for (name, shape) in param_template(&rec.kind, &in_shape)? {
            node.params.push((name, Tensor::zeros(&shape)));
        }
        let out_shape = infer_shape(&rec.kind, in_shape, spec.num_classes)?;
        shapes.push(out_shape);
        nodes.push(node);
    }
    Ok(Network::new(nodes, spec.input_shape, spec.num_classes)?)
}

/// Minimal local shape inference for parameter sizing; mirrors the engine's
/// rules but only as far as builders need.
fn infer_shape(
    kind: &LayerKind,
    input: tensor_core::IoShape,
    _classes: usize,
) -> Result<tensor_core::IoShape> {
    use tensor_core::IoShape;
    Ok(match kind {
        LayerKind::Conv2d { out_channels, kernel, stride, padding, .. } => {
            let IoShape::Spatial { h, w, .. } = input else {
                return Err(ZooError::BadSpec("conv on non-spatial input".into()));
            };
            IoShape::Spatial {
                c: *out_channels,
                h: (h + 2 * padding - kernel) / stride + 1,
                w: (w + 2 * padding - kernel) / stride + 1,
            }
        }
        LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
            let IoShape::Spatial { c, h, w } = input else {
                return Err(ZooError::BadSpec("pool on non-spatial input".into()));
            };
            IoShape::Spatial { c, h: (h - kernel) / stride + 1, w: (w - kernel) / stride + 1 }
        }
        LayerKind::Flatten => {
            let IoShape::Spatial { c, h, w } = input else {
                return Err(ZooError::BadSpec("flatten on non-spatial input".into()));
            };
            IoShape::Flat { f: c * h * w }
        }
        LayerKind::Dense { out_features, .. } => IoShape::Flat { f: *out_features },
        LayerKind::SoftmaxCrossEntropy => IoShape::Scalar,
        _ => input,
    })
}

/// Recovers the spec of a built network. Family is detected structurally
/// (residual joins ⇒ pre-activation ResNet). Exact inverse of [`build`].
pub fn describe<T: Scalar>(net: &Network<T>, name: &str) -> ArchitectureSpec {
    let family = if net
        .nodes()
        .iter()
        .any(|n| matches!(n.kind, LayerKind::ResidualAdd))
    {
        Family::PreResNet
    } else {
        Family::Vgg
    };
    ArchitectureSpec {
        family,
        name: name.to_string(),
        input_shape: net.input_shape(),
        num_classes: net.num_classes(),
        records: net
            .nodes()
            .iter()
            .map(|n| LayerRec { kind: n.kind.clone(), inputs: n.inputs.clone() })
            .collect(),
    }
}

/// Structural validation: the spec must build.
pub fn validate(spec: &ArchitectureSpec) -> Result<()> {
    build::<f32>(spec).map(|_| ())
}
