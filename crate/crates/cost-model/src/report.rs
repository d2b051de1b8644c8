//! Per-layer FLOP and parameter accounting.
//!
//! Conventions, chosen to match the structured-pruning literature:
//!
//! - one multiply-accumulate counts as one FLOP;
//! - only convolutions and dense layers carry FLOPs — batch norm, activations
//!   and pooling are "free" (they are dwarfed by the GEMMs they sit between);
//! - parameters count conv/dense weights and biases plus the two learnable
//!   batch-norm vectors; running statistics are buffers, not parameters.
//!
//! Shapes are taken from a freshly built network rather than re-derived here,
//! so the numbers can never drift from what the engine actually computes. For
//! an unstructured mask, conv FLOPs scale by the layer's surviving-weight
//! fraction (`cost_of_masked`); dense layers and everything else are untouched.

use std::collections::BTreeMap;

use model_zoo::{build, ArchitectureSpec};
use serde::{Deserialize, Serialize};
use tensor_core::{IoShape, LayerKind, Src};

use crate::error::{CostError, Result};

// ---------------------------------------------------------------------------
// Report types
// ---------------------------------------------------------------------------

/// Cost of a single layer, indexed by its position in the spec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub label: String,
    pub flops: u64,
    pub params: u64,
}

/// Per-layer costs plus their exact sums.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<LayerCost>,
    pub total_flops: u64,
    pub total_params: u64,
}

impl CostReport {
    fn from_rows(rows: Vec<LayerCost>) -> Self {
        let total_flops = rows.iter().map(|r| r.flops).sum();
        let total_params = rows.iter().map(|r| r.params).sum();
        CostReport { rows, total_flops, total_params }
    }
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

fn chw_of(net: &tensor_core::Network<f32>, src: Src) -> Result<(usize, usize, usize)> {
    let shape = match src {
        Src::Input => return Ok(net.input_shape()),
        Src::Node(j) => net.shape_of(j),
    };
    match shape {
        IoShape::Spatial { c, h, w } => Ok((c, h, w)),
        _ => Err(CostError::InvalidArg("expected a spatial input".into())),
    }
}

fn flat_of(net: &tensor_core::Network<f32>, src: Src) -> Result<usize> {
    match src {
        Src::Input => Err(CostError::InvalidArg("dense cannot read the image input".into())),
        Src::Node(j) => match net.shape_of(j) {
            IoShape::Flat { f } => Ok(f),
            _ => Err(CostError::InvalidArg("expected a flat input".into())),
        },
    }
}

/// Full per-layer cost report for a spec: FLOPs and parameters per row.
pub fn cost_of(spec: &ArchitectureSpec) -> Result<CostReport> {
    let net = build::<f32>(spec)?;
    let mut rows = Vec::with_capacity(spec.records.len());
    for (i, rec) in spec.records.iter().enumerate() {
        let (label, flops, params) = match rec.kind {
            LayerKind::Conv2d { out_channels, kernel, bias, .. } => {
                let (c_in, _, _) = chw_of(&net, rec.inputs[0])?;
                let (c_out, h_out, w_out) = match net.shape_of(i) {
                    IoShape::Spatial { c, h, w } => (c, h, w),
                    _ => unreachable!("conv output is spatial"),
                };
                debug_assert_eq!(c_out, out_channels);
                let macs = (c_out * c_in * kernel * kernel * h_out * w_out) as u64;
                let p = (c_out * c_in * kernel * kernel + if bias { c_out } else { 0 }) as u64;
                (format!("conv{kernel}x{kernel}({c_in}->{c_out})"), macs, p)
            }
            LayerKind::BatchNorm { .. } => {
                let (c, _, _) = chw_of(&net, rec.inputs[0])?;
                (format!("bn({c})"), 0, 2 * c as u64)
            }
            LayerKind::Dense { out_features, bias } => {
                let f_in = flat_of(&net, rec.inputs[0])?;
                let macs = (f_in * out_features) as u64;
                let p = (f_in * out_features + if bias { out_features } else { 0 }) as u64;
                (format!("dense({f_in}->{out_features})"), macs, p)
            }
            ref other => (other.tag().to_string(), 0, 0),
        };
        rows.push(LayerCost { index: i, label, flops, params });
    }
    Ok(CostReport::from_rows(rows))
}

/// Like [`cost_of`], but conv FLOPs are scaled by a per-layer keep fraction.
///
/// `keep` maps spec record index -> surviving fraction in `[0, 1]`; layers not
/// in the map keep everything. Only conv layers may appear in the map, since
/// unstructured masks cover conv weights only. Parameters are reported
/// unscaled — exact surviving-parameter counts come from the mask itself.
pub fn cost_of_masked(spec: &ArchitectureSpec, keep: &BTreeMap<usize, f64>) -> Result<CostReport> {
    for (&i, &frac) in keep {
        if i >= spec.records.len() {
            return Err(CostError::InvalidArg(format!("keep index {i} out of range")));
        }
        if !matches!(spec.records[i].kind, LayerKind::Conv2d { .. }) {
            return Err(CostError::InvalidArg(format!("keep index {i} is not a conv layer")));
        }
        if !(0.0..=1.0).contains(&frac) || !frac.is_finite() {
            return Err(CostError::InvalidArg(format!("keep fraction {frac} for layer {i}")));
        }
    }
    let mut report = cost_of(spec)?;
    for row in &mut report.rows {
        if let Some(&frac) = keep.get(&row.index) {
            row.flops = (row.flops as f64 * frac).round() as u64;
        }
    }
    Ok(CostReport::from_rows(report.rows))
}

/// Total FLOPs for one forward pass of a single example.
pub fn count_flops(spec: &ArchitectureSpec) -> Result<u64> {
    Ok(cost_of(spec)?.total_flops)
}

/// Total FLOPs under a per-layer keep-fraction map.
pub fn count_flops_masked(spec: &ArchitectureSpec, keep: &BTreeMap<usize, f64>) -> Result<u64> {
    Ok(cost_of_masked(spec, keep)?.total_flops)
}

/// Total learnable parameters.
pub fn count_params(spec: &ArchitectureSpec) -> Result<u64> {
    Ok(cost_of(spec)?.total_params)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use model_zoo::{preresnet, vgg, vgg_with_widths, Family, LayerRec, VggVariant};
    use tensor_core::Src;

    fn conv(out: usize, kernel: usize, stride: usize, padding: usize, input: Src) -> LayerRec {
        LayerRec {
            kind: LayerKind::Conv2d { out_channels: out, kernel, stride, padding, bias: false },
            inputs: vec![input],
        }
    }

    /// A bare conv chain (no norm/head) for hand-checkable counts.
    fn conv_chain(input_shape: (usize, usize, usize), convs: Vec<LayerRec>) -> ArchitectureSpec {
        let n = convs.len();
        let mut records = convs;
        records.push(LayerRec { kind: LayerKind::Flatten, inputs: vec![Src::Node(n - 1)] });
        records.push(LayerRec {
            kind: LayerKind::Dense { out_features: 2, bias: true },
            inputs: vec![Src::Node(n)],
        });
        records.push(LayerRec {
            kind: LayerKind::SoftmaxCrossEntropy,
            inputs: vec![Src::Node(n + 1)],
        });
        ArchitectureSpec {
            family: Family::Vgg,
            name: "chain".into(),
            input_shape,
            num_classes: 2,
            records,
        }
    }

    /// Independent recount: walk the spec with local shape arithmetic and tally
    /// one unit per output element times its receptive-field size.
    fn enumerate_macs(spec: &ArchitectureSpec) -> u64 {
        let mut shapes: Vec<(usize, usize, usize)> = Vec::new(); // (c,h,w); flat as (f,0,0)
        let mut total: u64 = 0;
        for rec in &spec.records {
            let at = |src: Src| match src {
                Src::Input => spec.input_shape,
                Src::Node(j) => shapes[j],
            };
            let shape = match rec.kind {
                LayerKind::Conv2d { out_channels, kernel, stride, padding, .. } => {
                    let (c_in, h, w) = at(rec.inputs[0]);
                    let h_out = (h + 2 * padding - kernel) / stride + 1;
                    let w_out = (w + 2 * padding - kernel) / stride + 1;
                    for _ in 0..out_channels {
                        for _ in 0..h_out * w_out {
                            total += (c_in * kernel * kernel) as u64;
                        }
                    }
                    (out_channels, h_out, w_out)
                }
                LayerKind::Dense { out_features, .. } => {
                    let (f, _, _) = at(rec.inputs[0]);
                    for _ in 0..out_features {
                        total += f as u64;
                    }
                    (out_features, 0, 0)
                }
                LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                    let (c, h, w) = at(rec.inputs[0]);
                    (c, (h - kernel) / stride + 1, (w - kernel) / stride + 1)
                }
                LayerKind::Flatten => {
                    let (c, h, w) = at(rec.inputs[0]);
                    (c * h.max(1) * w.max(1), 0, 0)
                }
                _ => at(rec.inputs[0]),
            };
            shapes.push(shape);
        }
        total
    }

    #[test]
    fn single_conv_matches_closed_form() {
        // 3->16 channels, 3x3 kernel, padded to keep 32x32: 16*3*9*1024.
        let spec = conv_chain((3, 32, 32), vec![conv(16, 3, 1, 1, Src::Input)]);
        let report = cost_of(&spec).unwrap();
        assert_eq!(report.rows[0].flops, 442_368);
        assert_eq!(report.rows[0].label, "conv3x3(3->16)");
    }

    #[test]
    fn degenerate_one_by_one_conv_costs_one_mac() {
        let spec = conv_chain((1, 1, 1), vec![conv(1, 1, 1, 0, Src::Input)]);
        assert_eq!(cost_of(&spec).unwrap().rows[0].flops, 1);
    }

    #[test]
    fn dense_params_count_weights_and_bias() {
        let spec = conv_chain((10, 1, 1), vec![conv(10, 1, 1, 0, Src::Input)]);
        // Head dense is 10 features -> 2 classes; swap in a 10->10 check.
        let row = &cost_of(&spec).unwrap().rows[2];
        assert!(row.label.starts_with("dense(10->"));
        let mut spec10 = ArchitectureSpec { num_classes: 10, ..spec };
        spec10.records[2].kind = LayerKind::Dense { out_features: 10, bias: true };
        assert_eq!(cost_of(&spec10).unwrap().rows[2].params, 110);
    }

    #[test]
    fn halving_every_width_of_a_two_conv_chain_quarters_conv_flops() {
        let full = conv_chain(
            (3, 16, 16),
            vec![conv(32, 3, 1, 1, Src::Input), conv(64, 3, 1, 1, Src::Node(0))],
        );
        let half = conv_chain(
            (3, 16, 16),
            vec![conv(16, 3, 1, 1, Src::Input), conv(32, 3, 1, 1, Src::Node(0))],
        );
        let conv_flops = |spec: &ArchitectureSpec| {
            cost_of(spec).unwrap().rows[0].flops + cost_of(spec).unwrap().rows[1].flops
        };
        let (f, h) = (conv_flops(&full), conv_flops(&half));
        // First conv halves only its output channels (input is fixed at 3), so
        // the combined reduction is a little under 4x.
        let ratio = f as f64 / h as f64;
        assert!(ratio > 3.3 && ratio <= 4.0, "ratio {ratio}");
    }

    #[test]
    fn every_template_matches_the_enumeration_oracle() {
        let specs = vec![
            vgg(VggVariant::VggMini, 10),
            vgg(VggVariant::Vgg16, 10),
            vgg(VggVariant::Vgg19, 10),
            preresnet(20, 10).unwrap(),
            preresnet(38, 100).unwrap(),
        ];
        for spec in specs {
            let got = count_flops(&spec).unwrap();
            let want = enumerate_macs(&spec);
            assert_eq!(got, want, "{}", spec.name);
        }
    }

    #[test]
    fn vgg_mini_params_match_hand_summation() {
        let spec = vgg(VggVariant::VggMini, 10);
        let widths = [16usize, 16, 32, 32, 64, 64, 128, 128];
        let mut want = 0u64;
        let mut c_in = 3usize;
        for &w in &widths {
            want += (w * c_in * 9 + 2 * w) as u64; // conv weights + bn gamma/beta
            c_in = w;
        }
        want += (128 * 10 + 10) as u64; // classifier
        assert_eq!(count_params(&spec).unwrap(), want);
    }

    #[test]
    fn totals_are_exact_row_sums() {
        for spec in [vgg(VggVariant::VggMini, 10), preresnet(20, 10).unwrap()] {
            let report = cost_of(&spec).unwrap();
            assert_eq!(report.total_flops, report.rows.iter().map(|r| r.flops).sum::<u64>());
            assert_eq!(report.total_params, report.rows.iter().map(|r| r.params).sum::<u64>());
        }
    }

    #[test]
    fn narrower_widths_never_cost_more() {
        let wide = vgg_with_widths(VggVariant::VggMini, &[16, 16, 32, 32, 64, 64, 128, 128], 10)
            .unwrap();
        let narrow =
            vgg_with_widths(VggVariant::VggMini, &[8, 16, 20, 32, 64, 33, 100, 128], 10).unwrap();
        assert!(count_params(&narrow).unwrap() <= count_params(&wide).unwrap());
        assert!(count_flops(&narrow).unwrap() <= count_flops(&wide).unwrap());
    }

    #[test]
    fn keep_fractions_scale_conv_rows_only() {
        let spec = vgg(VggVariant::VggMini, 10);
        let convs = spec.conv_layers();
        let keep: BTreeMap<usize, f64> = convs.iter().map(|&i| (i, 0.5)).collect();
        let full = cost_of(&spec).unwrap();
        let masked = cost_of_masked(&spec, &keep).unwrap();
        for (a, b) in full.rows.iter().zip(&masked.rows) {
            if keep.contains_key(&a.index) {
                assert_eq!(b.flops, (a.flops as f64 * 0.5).round() as u64);
            } else {
                assert_eq!(b.flops, a.flops);
            }
            assert_eq!(a.params, b.params);
        }
        assert!(masked.total_flops < full.total_flops);
    }

    #[test]
    fn masked_rejects_bad_indices_and_fractions() {
        let spec = vgg(VggVariant::VggMini, 10);
        let bn = spec.conv_layers()[0] + 1;
        assert!(cost_of_masked(&spec, &BTreeMap::from([(bn, 0.5)])).is_err());
        assert!(cost_of_masked(&spec, &BTreeMap::from([(0, 1.5)])).is_err());
        assert!(cost_of_masked(&spec, &BTreeMap::from([(10_000, 0.5)])).is_err());
    }

    proptest::proptest! {
        #[test]
        fn random_widths_stay_additive_and_monotone(
            w1 in 1usize..24, w2 in 1usize..24, w3 in 1usize..24, w4 in 1usize..24,
        ) {
            let widths = [w1, w2, w3, w4, w1.max(w2), w2, w3, w4];
            let spec = vgg_with_widths(VggVariant::VggMini, &widths, 10).unwrap();
            let report = cost_of(&spec).unwrap();
            proptest::prop_assert_eq!(
                report.total_flops,
                report.rows.iter().map(|r| r.flops).sum::<u64>()
            );
            proptest::prop_assert_eq!(report.total_flops, enumerate_macs(&spec));

            // Shrinking one layer can only shrink the totals.
            let mut smaller = widths;
            smaller[2] = 1;
            let shrunk = vgg_with_widths(VggVariant::VggMini, &smaller, 10).unwrap();
            proptest::prop_assert!(count_flops(&shrunk).unwrap() <= report.total_flops);
            proptest::prop_assert!(count_params(&shrunk).unwrap() <= report.total_params);
        }
    }
}
