//! Canonical architecture templates.
//!
//! All templates target 3×32×32 inputs. VGG variants are plain conv/BN/ReLU
//! chains with max-pool downsampling and a global-average head; pre-activation
//! ResNets use BN→ReLU→conv basic blocks with identity or 1×1-projection
//! shortcuts. Channel widths are the only free structural dimension the
//! pruning machinery edits.

use tensor_core::{LayerKind, Src};

use crate::error::{Result, ZooError};
use crate::spec::{ArchitectureSpec, Family, LayerRec};

/// VGG layout: convolutions per stage (a max pool follows each stage).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VggVariant {
    /// 13 convolutions in stages {2, 2, 3, 3, 3}.
    Vgg16,
    /// 16 convolutions in stages {2, 2, 4, 4, 4}.
    Vgg19,
    /// 8 convolutions in stages {2, 2, 2, 2}; desk-scale default.
    VggMini,
}

impl VggVariant {
    pub fn stage_layout(&self) -> &'static [usize] {
        match self {
            VggVariant::Vgg16 => &[2, 2, 3, 3, 3],
            VggVariant::Vgg19 => &[2, 2, 4, 4, 4],
            VggVariant::VggMini => &[2, 2, 2, 2],
        }
    }

    pub fn default_widths(&self) -> Vec<usize> {
        match self {
            VggVariant::Vgg16 => {
                vec![64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]
            }
            VggVariant::Vgg19 => {
                vec![64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512]
            }
            VggVariant::VggMini => vec![16, 16, 32, 32, 64, 64, 128, 128],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VggVariant::Vgg16 => "vgg16",
            VggVariant::Vgg19 => "vgg19",
            VggVariant::VggMini => "vgg-mini",
        }
    }
}

const INPUT: (usize, usize, usize) = (3, 32, 32);
const BN: LayerKind = LayerKind::BatchNorm { eps: 1e-5, momentum: 0.1 };

fn conv3(out: usize, stride: usize) -> LayerKind {
    LayerKind::Conv2d { out_channels: out, kernel: 3, stride, padding: 1, bias: false }
}

/// VGG with the variant's canonical widths.
pub fn vgg(variant: VggVariant, num_classes: usize) -> ArchitectureSpec {
    vgg_with_widths(variant, &variant.default_widths(), num_classes)
        .expect("canonical widths are valid")
}

/// VGG with caller-chosen per-convolution widths (e.g. a pruned or
/// pattern-guided architecture). `widths` must cover every convolution.
pub fn vgg_with_widths(
    variant: VggVariant,
    widths: &[usize],
    num_classes: usize,
) -> Result<ArchitectureSpec> {
    let layout = variant.stage_layout();
    let expect: usize = layout.iter().sum();
    if widths.len() != expect {
        return Err(ZooError::BadSpec(format!(
            "{} takes {expect} widths, got {}",
            variant.name(),
            widths.len()
        )));
    }
    if let Some(zero) = widths.iter().position(|&w| w == 0) {
        return Err(ZooError::BadSpec(format!("width of convolution {zero} is zero")));
    }
    let mut recs: Vec<LayerRec> = Vec::new();
    let mut prev: Src = Src::Input;
    let mut spatial = INPUT.1;
    let mut wi = 0;
    for &stage_convs in layout {
        for _ in 0..stage_convs {
            recs.push(LayerRec { kind: conv3(widths[wi], 1), inputs: vec![prev] });
            prev = Src::Node(recs.len() - 1);
            recs.push(LayerRec { kind: BN, inputs: vec![prev] });
            prev = Src::Node(recs.len() - 1);
            recs.push(LayerRec { kind: LayerKind::Relu, inputs: vec![prev] });
            prev = Src::Node(recs.len() - 1);
            wi += 1;
        }
        recs.push(LayerRec { kind: LayerKind::MaxPool { kernel: 2, stride: 2 }, inputs: vec![prev] });
        prev = Src::Node(recs.len() - 1);
        spatial /= 2;
    }
    push_head(&mut recs, prev, spatial, num_classes);
    Ok(ArchitectureSpec {
        family: Family::Vgg,
        name: variant.name().to_string(),
        input_shape: INPUT,
        num_classes,
        records: recs,
    })
}

/// Global-average head: AvgPool over the remaining spatial extent, flatten,
/// one dense classifier, loss.
fn push_head(recs: &mut Vec<LayerRec>, prev: Src, spatial: usize, num_classes: usize) {
    let mut prev = prev;
    recs.push(LayerRec {
        kind: LayerKind::AvgPool { kernel: spatial, stride: spatial },
        inputs: vec![prev],
    });
    prev = Src::Node(recs.len() - 1);
    recs.push(LayerRec { kind: LayerKind::Flatten, inputs: vec![prev] });
    prev = Src::Node(recs.len() - 1);
    recs.push(LayerRec {
        kind: LayerKind::Dense { out_features: num_classes, bias: true },
        inputs: vec![prev],
    });
    prev = Src::Node(recs.len() - 1);
    recs.push(LayerRec { kind: LayerKind::SoftmaxCrossEntropy, inputs: vec![prev] });
}

/// Pre-activation ResNet for 32×32 inputs. `depth = 6n + 2`; stage widths
/// are the canonical [16, 32, 64].
pub fn preresnet(depth: usize, num_classes: usize) -> Result<ArchitectureSpec> {
    if depth < 8 || (depth - 2) % 6 != 0 {
        return Err(ZooError::BadSpec(format!(
            "pre-activation resnet depth must be 6n+2 with n ≥ 1, got {depth}"
        )));
    }
    let n = (depth - 2) / 6;
    let widths = [16usize, 32, 64];
    let mut recs: Vec<LayerRec> = Vec::new();
    // Stem: plain 3×3 convolution to the first stage width.
    recs.push(LayerRec { kind: conv3(widths[0], 1), inputs: vec![Src::Input] });
    let mut prev = Src::Node(0);
    let mut in_ch = widths[0];
    let mut spatial = INPUT.1;
    for (stage, &width) in widths.iter().enumerate() {
        for block in 0..n {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let project = stride != 1 || in_ch != width;
            // Pre-activation: BN → ReLU → conv → BN → ReLU → conv.
            recs.push(LayerRec { kind: BN, inputs: vec![prev] });
            let b1 = Src::Node(recs.len() - 1);
            recs.push(LayerRec { kind: LayerKind::Relu, inputs: vec![b1] });
            let r1 = Src::Node(recs.len() - 1);
            recs.push(LayerRec { kind: conv3(width, stride), inputs: vec![r1] });
            let c1 = Src::Node(recs.len() - 1);
            recs.push(LayerRec { kind: BN, inputs: vec![c1] });
            let b2 = Src::Node(recs.len() - 1);
            recs.push(LayerRec { kind: LayerKind::Relu, inputs: vec![b2] });
            let r2 = Src::Node(recs.len() - 1);
            recs.push(LayerRec { kind: conv3(width, 1), inputs: vec![r2] });
            let c2 = Src::Node(recs.len() - 1);
            let shortcut = if project {
                // 1×1 projection reads the pre-activated input.
                recs.push(LayerRec {
                    kind: LayerKind::Conv2d {
                        out_channels: width,
                        kernel: 1,
                        stride,
                        padding: 0,
                        bias: false,
                    },
                    inputs: vec![r1],
                });
                Src::Node(recs.len() - 1)
            } else {
                prev
            };
            recs.push(LayerRec { kind: LayerKind::ResidualAdd, inputs: vec![c2, shortcut] });
            prev = Src::Node(recs.len() - 1);
            if stride == 2 {
                spatial /= 2;
            }
            in_ch = width;
        }
    }
    // Tail: final pre-activation, global average, classifier.
    recs.push(LayerRec { kind: BN, inputs: vec![prev] });
    prev = Src::Node(recs.len() - 1);
    recs.push(LayerRec { kind: LayerKind::Relu, inputs: vec![prev] });
    prev = Src::Node(recs.len() - 1);
    push_head(&mut recs, prev, spatial, num_classes);
    Ok(ArchitectureSpec {
        family: Family::PreResNet,
        name: format!("preresnet-{depth}"),
        input_shape: INPUT,
        num_classes,
        records: recs,
    })
}
