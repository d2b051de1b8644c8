//! Bit masks over conv weight tensors.
//!
//! [`BitMask`] is a little bitset packed LSB-first into bytes: bit `i` lives
//! at `bytes[i / 8] >> (i % 8) & 1`. The trailing bits of the last byte are
//! kept zero so equal masks are equal byte strings — checkpoints compare and
//! store them raw. A set bit means the weight survives.
//!
//! [`PruneMask`] maps node indices (conv layers) to their bitsets and derives
//! the global and per-layer keep fractions everything downstream consumes.

use std::collections::BTreeMap;

use tensor_core::{LayerKind, Network, ParamName, Scalar};

use crate::error::{PruneError, Result};

// ---------------------------------------------------------------------------
// BitMask
// ---------------------------------------------------------------------------

/// Fixed-length bitset, LSB-first within each byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    len: usize,
    bytes: Vec<u8>,
}

impl BitMask {
    /// All bits set (nothing pruned).
    pub fn ones(len: usize) -> Self {
        let mut mask = BitMask { len, bytes: vec![0xff; len.div_ceil(8)] };
        mask.clear_tail();
        mask
    }

    /// All bits clear.
    pub fn zeros(len: usize) -> Self {
        BitMask { len, bytes: vec![0u8; len.div_ceil(8)] }
    }

    /// Rebuild from packed bytes, validating length and canonical tail.
    pub fn from_bytes(len: usize, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(PruneError::InvalidArg(format!(
                "mask of {len} bits needs {} bytes, got {}",
                len.div_ceil(8),
                bytes.len()
            )));
        }
        let mask = BitMask { len, bytes };
        let mut canonical = mask.clone();
        canonical.clear_tail();
        if canonical.bytes != mask.bytes {
            return Err(PruneError::InvalidArg("mask has set bits past its length".into()));
        }
        Ok(mask)
    }

    fn clear_tail(&mut self) {
        if self.len % 8 != 0 {
            if let Some(last) = self.bytes.last_mut() {
                *last &= (1u8 << (self.len % 8)) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len);
        if value {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Surviving fraction of this layer.
    pub fn density(&self) -> f64 {
        if self.len == 0 {
            return 1.0;
        }
        self.count_ones() as f64 / self.len as f64
    }

    /// Raw packed bytes for serialization.
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// True if every zero of `other` is also a zero here.
    pub fn zeros_superset_of(&self, other: &BitMask) -> bool {
        self.len == other.len
            && self.bytes.iter().zip(&other.bytes).all(|(a, b)| a & b == *a)
    }
}

// ---------------------------------------------------------------------------
// PruneMask
// ---------------------------------------------------------------------------

/// Per-conv-layer bitsets, keyed by node index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneMask {
    layers: BTreeMap<usize, BitMask>,
}

impl PruneMask {
    pub fn new() -> Self {
        PruneMask::default()
    }

    pub fn insert(&mut self, node: usize, mask: BitMask) {
        self.layers.insert(node, mask);
    }

    pub fn layers(&self) -> &BTreeMap<usize, BitMask> {
        &self.layers
    }

    pub fn layer(&self, node: usize) -> Option<&BitMask> {
        self.layers.get(&node)
    }

    pub fn layer_mut(&mut self, node: usize) -> Option<&mut BitMask> {
        self.layers.get_mut(&node)
    }

    pub fn total_bits(&self) -> usize {
        self.layers.values().map(BitMask::len).sum()
    }

    pub fn kept_bits(&self) -> usize {
        self.layers.values().map(BitMask::count_ones).sum()
    }

    /// Global surviving fraction: kept / total over all covered layers.
    pub fn density(&self) -> f64 {
        let total = self.total_bits();
        if total == 0 {
            return 1.0;
        }
        self.kept_bits() as f64 / total as f64
    }

    /// Per-layer keep fractions, in the shape the FLOP accounting expects.
    pub fn keep_fractions(&self) -> BTreeMap<usize, f64> {
        self.layers.iter().map(|(&i, m)| (i, m.density())).collect()
    }

    /// Check each covered node is a conv whose weight length matches its mask.
    pub fn validate_against<T: Scalar>(&self, net: &Network<T>) -> Result<()> {
        for (&i, mask) in &self.layers {
            if i >= net.num_nodes() {
                return Err(PruneError::Inconsistent {
                    layer: i,
                    detail: "mask covers a node the network does not have".into(),
                });
            }
            if !matches!(net.node(i).kind, LayerKind::Conv2d { .. }) {
                return Err(PruneError::Inconsistent {
                    layer: i,
                    detail: "mask covers a non-conv node".into(),
                });
            }
            let weight = net.param(i, ParamName::Weight).expect("conv has a weight");
            if weight.len() != mask.len() {
                return Err(PruneError::Inconsistent {
                    layer: i,
                    detail: format!("mask has {} bits but weight has {}", mask.len(), weight.len()),
                });
            }
        }
        Ok(())
    }

    /// True if every zero in `earlier` is still zero here (monotone pruning).
    pub fn zeros_superset_of(&self, earlier: &PruneMask) -> bool {
        earlier.layers.iter().all(|(i, m)| {
            self.layers.get(i).map(|own| own.zeros_superset_of(m)).unwrap_or(false)
        })
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_pack_lsb_first() {
        let mut m = BitMask::zeros(10);
        m.set(0, true);
        m.set(3, true);
        m.set(9, true);
        assert_eq!(m.bytes(), &[0b0000_1001, 0b0000_0010]);
        assert!(m.get(0) && m.get(3) && m.get(9));
        assert!(!m.get(1) && !m.get(8));
        assert_eq!(m.count_ones(), 3);
    }

    #[test]
    fn ones_mask_has_a_clean_tail() {
        let m = BitMask::ones(11);
        assert_eq!(m.count_ones(), 11);
        assert_eq!(m.bytes()[1], 0b0000_0111);
        assert_eq!(BitMask::from_bytes(11, m.bytes().to_vec()).unwrap(), m);
    }

    #[test]
    fn from_bytes_rejects_bad_lengths_and_dirty_tails() {
        assert!(BitMask::from_bytes(10, vec![0xff]).is_err());
        assert!(BitMask::from_bytes(10, vec![0xff, 0xff]).is_err());
        assert!(BitMask::from_bytes(10, vec![0xff, 0x03]).is_ok());
    }

    #[test]
    fn round_trip_is_identity() {
        let mut m = BitMask::zeros(23);
        for i in [0, 5, 11, 22] {
            m.set(i, true);
        }
        let back = BitMask::from_bytes(23, m.bytes().to_vec()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn density_counts_kept_over_total() {
        let mut pm = PruneMask::new();
        pm.insert(0, BitMask::ones(8));
        let mut half = BitMask::ones(8);
        for i in 0..4 {
            half.set(i, false);
        }
        pm.insert(3, half);
        assert!((pm.density() - 0.75).abs() < 1e-12);
        assert_eq!(pm.keep_fractions()[&3], 0.5);
        assert_eq!(pm.kept_bits(), 12);
    }

    #[test]
    fn zero_superset_tracks_monotone_growth() {
        let mut a = PruneMask::new();
        let mut b = PruneMask::new();
        let mut m1 = BitMask::ones(16);
        m1.set(2, false);
        a.insert(0, m1.clone());
        m1.set(7, false);
        b.insert(0, m1);
        assert!(b.zeros_superset_of(&a));
        assert!(!a.zeros_superset_of(&b));
    }

    proptest::proptest! {
        #[test]
        fn set_get_count_agree(len in 1usize..200, flips in proptest::collection::vec(0usize..200, 0..40)) {
            let mut m = BitMask::zeros(len);
            let mut reference = vec![false; len];
            for f in flips {
                let i = f % len;
                let v = !reference[i];
                reference[i] = v;
                m.set(i, v);
            }
            for (i, &want) in reference.iter().enumerate() {
                proptest::prop_assert_eq!(m.get(i), want);
            }
            proptest::prop_assert_eq!(m.count_ones(), reference.iter().filter(|&&b| b).count());
            let back = BitMask::from_bytes(len, m.bytes().to_vec()).unwrap();
            proptest::prop_assert_eq!(back, m);
        }
    }
}
