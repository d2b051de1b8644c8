//! Winning-ticket state: the θ0 snapshot, the growing mask, and resets.
//!
//! The experiment hinges on θ0 really being the *initial* weights, so
//! [`snapshot_init`] refuses any network whose step counter is nonzero —
//! there is no legitimate way to capture a ticket after training started.
//!
//! Iterative pruning removes `⌊0.2 · survivors⌋` of the currently surviving
//! conv weights per round, globally by magnitude (dense layers are exempt,
//! matching the conv-only masking convention used elsewhere). The surviving
//! fraction is always recomputed from the mask, so it equals `0.8^i` exactly
//! when the weight counts divide evenly and honestly reflects the floor
//! otherwise.

use pruning::{BitMask, PruneMask};
use tensor_core::{LayerKind, Network, ParamName, Scalar};

use crate::error::{LotteryError, Result};

// ---------------------------------------------------------------------------
// Snapshot
// ---------------------------------------------------------------------------

/// One saved parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEntry<T> {
    pub node: usize,
    pub name: ParamName,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Deep copy of every parameter of a network at initialization time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub entries: Vec<SnapshotEntry<T>>,
}

impl<T: Scalar> Snapshot<T> {
    /// Write all saved tensors back into `net`, validating shapes.
    pub fn restore(&self, net: &mut Network<T>) -> Result<()> {
        for entry in &self.entries {
            let param = net.param_mut(entry.node, entry.name).ok_or_else(|| {
                LotteryError::Mismatch {
                    node: entry.node,
                    detail: format!("network has no {} parameter here", entry.name.as_str()),
                }
            })?;
            if param.shape() != entry.shape.as_slice() {
                return Err(LotteryError::Mismatch {
                    node: entry.node,
                    detail: format!(
                        "snapshot shape {:?} vs network {:?}",
                        entry.shape,
                        param.shape()
                    ),
                });
            }
            param.data_mut().copy_from_slice(&entry.data);
        }
        Ok(())
    }
}

/// Capture θ0. Refused once training has started.
pub fn snapshot_init<T: Scalar>(net: &Network<T>) -> Result<Snapshot<T>> {
    if net.steps() > 0 {
        return Err(LotteryError::NotFresh(net.steps()));
    }
    let mut entries = Vec::new();
    net.for_each_param(|node, name, tensor| {
        entries.push(SnapshotEntry {
            node,
            name,
            shape: tensor.shape().to_vec(),
            data: tensor.data().to_vec(),
        });
    });
    Ok(Snapshot { entries })
}

// ---------------------------------------------------------------------------
// TicketState
// ---------------------------------------------------------------------------

/// Everything an iterative lottery run carries between rounds.
#[derive(Debug, Clone)]
pub struct TicketState<T> {
    pub theta0: Snapshot<T>,
    pub mask: PruneMask,
    pub iteration: usize,
    pub surviving_fraction: f64,
}

impl<T: Scalar> TicketState<T> {
    /// Snapshot a fresh network and start with an all-ones mask over its
    /// conv layers.
    pub fn new(net: &Network<T>) -> Result<Self> {
        let theta0 = snapshot_init(net)?;
        let mut mask = PruneMask::new();
        for i in 0..net.num_nodes() {
            if matches!(net.node(i).kind, LayerKind::Conv2d { .. }) {
                mask.insert(i, BitMask::ones(net.param(i, ParamName::Weight).unwrap().len()));
            }
        }
        Ok(TicketState { theta0, mask, iteration: 0, surviving_fraction: 1.0 })
    }
}

/// One pruning round: among surviving conv weights of `net`, move the 20%
/// smallest magnitudes (global scope, ties keep the lower (node, position))
/// into the zero set.
pub fn lottery_prune_iteration<T: Scalar>(
    net: &Network<T>,
    state: &mut TicketState<T>,
) -> Result<()> {
    state.mask.validate_against(net)?;
    let mut pooled: Vec<(f64, usize, usize)> = Vec::new();
    for (&i, m) in state.mask.layers() {
        let data = net.param(i, ParamName::Weight).unwrap().data();
        for p in 0..m.len() {
            if m.get(p) {
                pooled.push((data[p].to_f64().abs(), i, p));
            }
        }
    }
    // ⌊0.2 · n⌋ in exact integer arithmetic.
    let prune = pooled.len() / 5;
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| (b.1, b.2).cmp(&(a.1, a.2))));
    for &(_, i, p) in &pooled[..prune] {
        state.mask.layer_mut(i).unwrap().set(p, false);
    }
    state.iteration += 1;
    state.surviving_fraction = state.mask.density();
    Ok(())
}

/// Rewind to the ticket: every parameter back to θ0, then masked conv
/// weights to zero. The step counter restarts, so the result is a fresh
/// network for retraining.
pub fn reset_to_ticket<T: Scalar>(
    net: &mut Network<T>,
    theta0: &Snapshot<T>,
    mask: &PruneMask,
) -> Result<()> {
    theta0.restore(net)?;
    mask.validate_against(net)?;
    for (&i, m) in mask.layers() {
        let weight = net.param_mut(i, ParamName::Weight).unwrap();
        let data = weight.data_mut();
        for p in 0..m.len() {
            if !m.get(p) {
                data[p] = T::ZERO;
            }
        }
    }
    net.clear_grads();
    net.set_steps(0);
    Ok(())
}

// ---------------------------------------------------------------------------
