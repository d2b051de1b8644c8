//! Pruning criteria, masks, and network surgery.
//!
//! The crate covers both families of pruning:
//!
//! - **structured** (channels/filters): L1-norm filter ranking
//!   ([`l1_filter_select`]), BN-scale thresholding with its training penalty
//!   ([`slimming_select`], [`slimming_penalty`]), soft filter pruning
//!   ([`soft_filter_prune_epoch`]), and the uniform-width baseline
//!   ([`uniform_channel`]). Structured decisions become a
//!   [`ChannelKeepSet`], and [`surgery`] carves out the physically smaller
//!   network.
//! - **unstructured** (individual weights): global or per-layer magnitude
//!   masks ([`magnitude_mask`]), Bernoulli masks ([`uniform_sparsify`]),
//!   scaled sparse re-initialization ([`sparse_reinit`]) and mask-preserving
//!   training ([`masked_train_step`]), all built on [`PruneMask`].
//!
//! Selections are deterministic: counts come from exact ratio arithmetic and
//! ties always keep the lower index, so every criterion is checkable against
//! a plain sort oracle.

pub mod criteria;
pub mod error;
pub mod mask;
pub mod sparse;
pub mod surgery;

pub use criteria::{
    filter_l1_norms, l1_filter_select, l1_keep_top_k, magnitude_mask, slimming_gammas,
    slimming_penalty, slimming_select, soft_filter_prune_epoch, MagnitudeScope, SfpConfig,
    SlimmingConfig,
};
pub use error::{PruneError, Result};
pub use mask::{BitMask, PruneMask};
pub use sparse::{masked_train_step, sparse_reinit, uniform_sparsify};
pub use surgery::{surgery, uniform_channel, zero_pruned_channels, ChannelKeepSet};
