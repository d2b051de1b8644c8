//! SGD with Nesterov momentum.
//!
//! Weight decay is applied to convolution and dense weight matrices only —
//! never to biases or batch-norm affine parameters. The update, per element
//! (computed in `f64`, stored in the element type):
//!
//! ```text
//! g ← grad + wd·w        (decayed tensors only)
//! v ← μ·v − lr·g
//! w ← w + μ·v − lr·g
//! ```

use crate::error::{EngineError, Result};
use crate::layer::{LayerKind, ParamName};
use crate::network::Network;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
struct Slot<T: Scalar> {
    node: usize,
    name: ParamName,
    decay: bool,
    velocity: Vec<T>,
}

/// Momentum buffers plus the fixed optimizer hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    momentum: f64,
    weight_decay: f64,
    slots: Vec<Slot<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Registers every trainable parameter of `net`, with zero velocity.
    pub fn new(net: &Network<T>, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(EngineError::InvalidArg(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if weight_decay < 0.0 || !weight_decay.is_finite() {
            return Err(EngineError::InvalidArg(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        let mut slots = Vec::new();
        for (i, node) in net.nodes().iter().enumerate() {
            let kind_decays =
                matches!(node.kind, LayerKind::Conv2d { .. } | LayerKind::Dense { .. });
            for (name, t) in &node.params {
                if !name.trainable() {
                    continue;
                }
                slots.push(Slot {
                    node: i,
                    name: *name,
                    decay: kind_decays && *name == ParamName::Weight,
                    velocity: vec![T::ZERO; t.len()],
                });
            }
        }
        Ok(OptimizerState { momentum, weight_decay, slots })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    /// Velocity buffer for one parameter, if registered.
    pub fn velocity(&self, node: usize, name: ParamName) -> Option<&[T]> {
        self.slots
            .iter()
            .find(|s| s.node == node && s.name == name)
            .map(|s| s.velocity.as_slice())
    }

    /// Mutable velocity access (mask application, checkpoint restore).
    pub fn velocity_mut(&mut self, node: usize, name: ParamName) -> Option<&mut [T]> {
        self.slots
            .iter_mut()
            .find(|s| s.node == node && s.name == name)
            .map(|s| s.velocity.as_mut_slice())
    }

    /// Iterates `(node, name, velocity)` in canonical order.
    pub fn for_each_velocity(&self, mut f: impl FnMut(usize, ParamName, &[T])) {
        for s in &self.slots {
            f(s.node, s.name, &s.velocity);
        }
    }
}

/// One SGD step at learning rate `lr`. Gradients must be populated (run
/// `backward` first); the step bumps the network's parameter version and its
/// step counter.
pub fn sgd_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(EngineError::InvalidArg(format!("learning rate must be positive, got {lr}")));
    }
    let mu = opt.momentum;
    let wd = opt.weight_decay;
    for slot in &mut opt.slots {
        let node = &mut net.nodes_internal_mut()[slot.node];
        let tensor = node.param_mut(slot.name).ok_or_else(|| {
            EngineError::InvalidArg(format!(
                "optimizer slot {}/{} no longer exists",
                slot.node,
                slot.name.as_str()
            ))
        })?;
        if tensor.len() != slot.velocity.len() {
            return Err(EngineError::ShapeMismatch {
                layer: format!("node {} ({})", slot.node, slot.name.as_str()),
                detail: format!(
                    "parameter has {} elements but optimizer state has {}",
                    tensor.len(),
                    slot.velocity.len()
                ),
            });
        }
        let grad: Vec<f64> = match tensor.grad() {
            Some(g) => g.iter().map(|v| v.to_f64()).collect(),
            None => {
                return Err(EngineError::InvalidArg(format!(
                    "missing gradient for node {} ({}); run backward first",
                    slot.node,
                    slot.name.as_str()
                )))
            }
        };
        let data = tensor.data_mut();
        for ((w, v), g0) in data.iter_mut().zip(&mut slot.velocity).zip(grad) {
            let mut g = g0;
            if slot.decay {
                g += wd * w.to_f64();
            }
            let vn = mu * v.to_f64() - lr * g;
            *w = T::from_f64(w.to_f64() + mu * vn - lr * g);
            *v = T::from_f64(vn);
        }
    }
    net.bump_version();
    net.note_step();
    Ok(())
}
