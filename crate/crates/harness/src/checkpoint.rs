//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PRLB" | u32 version | u32 metadata length | metadata JSON | payload
//! ```
//!
//! The metadata block names every buffer in the payload — parameter tensors
//! (node, name, shape), optimizer velocity slots, packed weight masks — plus
//! the architecture spec, step counter, and RNG coordinates. The payload is
//! those buffers back to back in metadata order: raw little-endian `f32`
//! words for tensors, packed LSB-first bytes for masks. Everything that
//! varies is in the metadata, so `save(load(x))` is byte-identical, and a
//! checkpoint plus its config is enough to resume training bit-exactly.
//!
//! The RNG is stored as (seed, stream, word position) rather than an opaque
//! state dump: `ChaCha8Rng` can be reconstructed from those three exactly,
//! and they survive format evolution better than internals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use model_zoo::{build, describe, ArchitectureSpec};
use pruning::{BitMask, PruneMask};
use tensor_core::{Network, OptimizerState, ParamName};

use crate::error::{HarnessError, Result};

/// Container magic.
pub const MAGIC: [u8; 4] = *b"PRLB";
/// Current container version.
pub const VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Metadata schema

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    node: usize,
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptMeta {
    momentum: f64,
    weight_decay: f64,
    slots: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskEntry {
    node: usize,
    bits: usize,
}

/// Coordinates sufficient to rebuild a `ChaCha8Rng` exactly. The 128-bit
/// word position is split into two 64-bit halves for JSON portability.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    /// Captures the full position of `rng`.
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    /// Rebuilds the generator at the captured position.
    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    spec: ArchitectureSpec,
    steps: u64,
    params: Vec<TensorEntry>,
    opt: Option<OptMeta>,
    rng: Option<RngState>,
    masks: Vec<MaskEntry>,
}

// ---------------------------------------------------------------------------
// Checkpoint object

/// A decoded checkpoint: metadata plus the payload buffers it names.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    meta: Meta,
    tensor_data: Vec<Vec<f32>>,
    mask_data: Vec<Vec<u8>>,
}

fn parse_param_name(s: &str) -> Result<ParamName> {
    let all = [
        ParamName::Weight,
        ParamName::Bias,
        ParamName::Gamma,
        ParamName::Beta,
        ParamName::RunningMean,
        ParamName::RunningVar,
    ];
    all.into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| HarnessError::Corrupt(format!("unknown parameter name {s:?}")))
}

impl Checkpoint {
    /// Snapshots a network (and optionally optimizer, RNG, mask) for saving.
    /// `name` becomes the stored spec's name.
    pub fn capture(
        name: &str,
        net: &Network<f32>,
        opt: Option<&OptimizerState<f32>>,
        rng: Option<&ChaCha8Rng>,
        mask: Option<&PruneMask>,
    ) -> Result<Self> {
        if let Some(m) = mask {
            m.validate_against(net)?;
        }
        let spec = describe(net, name);
        let mut params = Vec::new();
        let mut tensor_data = Vec::new();
        net.for_each_param(|node, pname, t| {
            params.push(TensorEntry {
                node,
                name: pname.as_str().to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
            });
            tensor_data.push(t.data().to_vec());
        });
        let opt_meta = opt.map(|o| {
            let mut slots = Vec::new();
            o.for_each_velocity(|node, pname, v| {
                slots.push(TensorEntry {
                    node,
                    name: pname.as_str().to_string(),
                    shape: vec![v.len()],
                    dtype: "f32".into(),
                });
                tensor_data.push(v.to_vec());
            });
            OptMeta { momentum: o.momentum(), weight_decay: o.weight_decay(), slots }
        });
        let mut masks = Vec::new();
        let mut mask_data = Vec::new();
        if let Some(m) = mask {
            for (&node, bm) in m.layers() {
                masks.push(MaskEntry { node, bits: bm.len() });
                mask_data.push(bm.bytes().to_vec());
            }
        }
        Ok(Checkpoint {
            meta: Meta {
                spec,
                steps: net.steps(),
                params,
                opt: opt_meta,
                rng: rng.map(RngState::capture),
                masks,
            },
            tensor_data,
            mask_data,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.meta.spec
    }

    pub fn steps(&self) -> u64 {
        self.meta.steps
    }

    /// Rebuilds the network: fresh build from the stored spec, stored values
    /// copied into every parameter, step counter restored.
    pub fn network(&self) -> Result<Network<f32>> {
        let mut net = build::<f32>(&self.meta.spec)?;
        for (entry, data) in self.meta.params.iter().zip(&self.tensor_data) {
            let pname = parse_param_name(&entry.name)?;
            let t = net.param_mut(entry.node, pname).ok_or_else(|| {
                HarnessError::Corrupt(format!(
                    "stored tensor {}/{} does not exist in the rebuilt network",
                    entry.node, entry.name
                ))
            })?;
            if t.shape() != entry.shape.as_slice() || t.len() != data.len() {
                return Err(HarnessError::Corrupt(format!(
                    "shape mismatch for {}/{}: stored {:?}, rebuilt {:?}",
                    entry.node,
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(data);
        }
        net.set_steps(self.meta.steps);
        Ok(net)
    }

    /// Rebuilds the optimizer against `net`, restoring velocity buffers.
    pub fn optimizer(&self, net: &Network<f32>) -> Result<Option<OptimizerState<f32>>> {
        let Some(om) = &self.meta.opt else { return Ok(None) };
        let mut opt = OptimizerState::new(net, om.momentum, om.weight_decay)?;
        let velocities = &self.tensor_data[self.meta.params.len()..];
        for (entry, data) in om.slots.iter().zip(velocities) {
            let pname = parse_param_name(&entry.name)?;
            let v = opt.velocity_mut(entry.node, pname).ok_or_else(|| {
                HarnessError::Corrupt(format!(
                    "stored velocity {}/{} has no optimizer slot",
                    entry.node, entry.name
                ))
            })?;
            if v.len() != data.len() {
                return Err(HarnessError::Corrupt(format!(
                    "velocity length mismatch for {}/{}",
                    entry.node, entry.name
                )));
            }
            v.copy_from_slice(data);
        }
        Ok(Some(opt))
    }

    /// The stored RNG position, if any.
    pub fn rng(&self) -> Option<ChaCha8Rng> {
        self.meta.rng.as_ref().map(RngState::restore)
    }

    /// The stored weight mask, if any.
    pub fn mask(&self) -> Result<Option<PruneMask>> {
        if self.meta.masks.is_empty() {
            return Ok(None);
        }
        let mut mask = PruneMask::new();
        for (entry, bytes) in self.meta.masks.iter().zip(&self.mask_data) {
            mask.insert(entry.node, BitMask::from_bytes(entry.bits, bytes.clone())?);
        }
        Ok(Some(mask))
    }

    // -- wire format --------------------------------------------------------

    /// Serializes to the container byte layout.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(12 + meta.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(u32::try_from(meta.len()).map_err(|_| {
            HarnessError::Corrupt("metadata block exceeds u32 length".into())
        })?)
        .to_le_bytes());
        out.extend_from_slice(&meta);
        for buf in &self.tensor_data {
            for v in buf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for bytes in &self.mask_data {
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Parses the container byte layout, verifying every advertised length.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(HarnessError::Truncated("missing magic".into()));
        }
        if bytes[..4] != MAGIC {
            return Err(HarnessError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(HarnessError::Truncated("missing header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(HarnessError::BadVersion(version));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < meta_len {
            return Err(HarnessError::Truncated(format!(
                "metadata block claims {meta_len} bytes, {} available",
                body.len()
            )));
        }
        let meta: Meta = serde_json::from_slice(&body[..meta_len])
            .map_err(|e| HarnessError::Corrupt(format!("metadata: {e}")))?;
        let mut payload = &body[meta_len..];
        let velocity_entries =
            meta.opt.as_ref().map(|o| o.slots.clone()).unwrap_or_default();
        let mut tensor_data = Vec::with_capacity(meta.params.len() + velocity_entries.len());
        for entry in meta.params.iter().chain(&velocity_entries) {
            if entry.dtype != "f32" {
                return Err(HarnessError::Corrupt(format!(
                    "unsupported dtype {:?} for {}/{}",
                    entry.dtype, entry.node, entry.name
                )));
            }
            let len: usize = entry.shape.iter().product();
            let nbytes = len * 4;
            if payload.len() < nbytes {
                return Err(HarnessError::Truncated(format!(
                    "tensor {}/{} needs {nbytes} bytes, {} left",
                    entry.node,
                    entry.name,
                    payload.len()
                )));
            }
            tensor_data.push(
                payload[..nbytes]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            payload = &payload[nbytes..];
        }
        let mut mask_data = Vec::with_capacity(meta.masks.len());
        for entry in &meta.masks {
            let nbytes = entry.bits.div_ceil(8);
            if payload.len() < nbytes {
                return Err(HarnessError::Truncated(format!(
                    "mask for node {} needs {nbytes} bytes, {} left",
                    entry.node,
                    payload.len()
                )));
            }
            mask_data.push(payload[..nbytes].to_vec());
            payload = &payload[nbytes..];
        }
        if !payload.is_empty() {
            return Err(HarnessError::Corrupt(format!(
                "{} trailing bytes after payload",
                payload.len()
            )));
        }
        Ok(Checkpoint { meta, tensor_data, mask_data })
    }
}

/// Writes `cp` to `path` in the container format.
pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let bytes = cp.encode()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a checkpoint from `path`.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::decode(&bytes)
}

// ---------------------------------------------------------------------------
