//! Finite-difference gradient checking.
//!
//! Runs the analytic backward pass once, then probes parameters with central
//! differences of the training-mode objective. Everything happens on `f64`
//! clones of the network; the caller's network is untouched. Batch-norm
//! running statistics drift across probe evaluations but never enter the
//! training-mode loss, so probes are consistent by construction.

use crate::error::{EngineError, Result};
use crate::layer::ParamName;
use crate::network::{Mode, Network};
use crate::tensor::Tensor;

/// Optional L1 penalty `λ·Σ|γ|` over the Gamma vectors of the listed nodes,
/// folded into both the objective and the analytic gradient.
#[derive(Debug, Clone)]
pub struct GammaL1 {
    pub lambda: f64,
    pub nodes: Vec<usize>,
}

/// Knobs for [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the worst relative error.
    pub tolerance: f64,
    /// Checks per tensor; 0 checks every element.
    pub max_checks_per_tensor: usize,
    /// Multiplies the analytic gradient before comparison. 1.0 for a real
    /// check; any other value is a deliberately corrupted negative control.
    pub grad_scale: f64,
    pub gamma_l1: Option<GammaL1>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_checks_per_tensor: 0,
            grad_scale: 1.0,
            gamma_l1: None,
        }
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(node, param, flat index)` of the worst disagreement.
    pub worst: Option<(usize, ParamName, usize)>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn objective(
    net: &mut Network<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    gamma_l1: &Option<GammaL1>,
) -> Result<f64> {
    let mut total = net.forward(images, labels, Mode::Train)?.loss();
    if let Some(p) = gamma_l1 {
        for &i in &p.nodes {
            let gamma = net.param(i, ParamName::Gamma).ok_or_else(|| {
                EngineError::InvalidArg(format!("node {i} has no gamma to penalize"))
            })?;
            total += p.lambda * gamma.data().iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    Ok(total)
}

/// Compares analytic gradients against central differences of the objective.
pub fn finite_diff_check(
    net: &Network<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    opts: &FdOptions,
) -> Result<FdReport> {
    if !(opts.step > 0.0) || !(opts.tolerance > 0.0) {
        return Err(EngineError::InvalidArg("fd step and tolerance must be positive".into()));
    }
    if opts.grad_scale == 0.0 || !opts.grad_scale.is_finite() {
        return Err(EngineError::InvalidArg("grad_scale must be finite and non-zero".into()));
    }

    // Analytic gradients, including the optional penalty term.
    let mut work = net.clone();
    let trace = work.forward(images, labels, Mode::Train)?;
    work.backward(trace)?;
    let mut analytic: Vec<(usize, ParamName, Vec<f64>)> = Vec::new();
    work.for_each_param(|node, name, t| {
        if !name.trainable() {
            return;
        }
        let mut g = t.grad().expect("backward populated all trainable grads").to_vec();
        if let Some(p) = &opts.gamma_l1 {
            if name == ParamName::Gamma && p.nodes.contains(&node) {
                for (gv, w) in g.iter_mut().zip(t.data()) {
                    *gv += p.lambda * w.signum();
                }
            }
        }
        for gv in &mut g {
            *gv *= opts.grad_scale;
        }
        analytic.push((node, name, g));
    });

    // Central-difference probes on a fresh clone.
    let mut probe = net.clone();
    let h = opts.step;
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for (node, name, grads) in &analytic {
        let len = grads.len();
        let picks: Vec<usize> = if opts.max_checks_per_tensor == 0 || len <= opts.max_checks_per_tensor
        {
            (0..len).collect()
        } else {
            // Evenly strided subsample; deterministic.
            (0..opts.max_checks_per_tensor).map(|t| t * len / opts.max_checks_per_tensor).collect()
        };
        for idx in picks {
            let orig = probe.param(*node, *name).unwrap().data()[idx];
            probe.param_mut(*node, *name).unwrap().data_mut()[idx] = orig + h;
            let lp = objective(&mut probe, images, labels, &opts.gamma_l1)?;
            probe.param_mut(*node, *name).unwrap().data_mut()[idx] = orig - h;
            let lm = objective(&mut probe, images, labels, &opts.gamma_l1)?;
            probe.param_mut(*node, *name).unwrap().data_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = Some((*node, *name, idx));
            }
        }
    }
    Ok(FdReport { checked, max_rel_err: max_rel, worst, tolerance: opts.tolerance })
}
