//! Architecture templates and builders.
//!
//! The workspace's networks are described by [`ArchitectureSpec`] — a flat,
//! serializable record list aligned one-to-one with engine graph nodes —
//! and built with [`build`]. Stage membership ([`stages_of`]) and channel
//! prunability ([`ArchitectureSpec::prunable_convs`]) are derived from
//! structure, so a spec carries no annotations that could drift out of sync
//! with the graph.

pub mod error;
pub mod spec;
pub mod templates;

pub use error::{Result, ZooError};
pub use spec::{
    build, describe, stage_sizes, stages_of, validate, ArchitectureSpec, Family, LayerRec,
};
pub use templates::{preresnet, vgg, vgg_with_widths, VggVariant};
