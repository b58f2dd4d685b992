//! Binary integer encoding of the discount grid.
//!
//! A grid of `n` categories is addressed through `Q = ceil(log2 n)` bits
//! with weights `w_k = 2^k` for `k < Q-1` and a reduced top weight
//! `w_{Q-1} = n - 2^{Q-1}`, so that every bit pattern decodes to a valid
//! category (totality) and every category is reachable (surjectivity).
//! Non-power-of-two grids make the map many-to-one.

use crate::error::{DspError, Result};
use crate::model::DiscountScheme;

/// Encoding of one discount variable into `Q` binary variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegerEncoding {
    n_categories: usize,
    weights: Vec<u32>,
}

impl IntegerEncoding {
    pub fn for_scheme(scheme: &DiscountScheme) -> Self {
        Self::new(scheme.n_categories())
    }

    pub fn new(n_categories: usize) -> Self {
        assert!(n_categories >= 2, "grid needs at least two categories");
        let q = usize::BITS - (n_categories - 1).leading_zeros();
        let q = q.max(1) as usize;
        let mut weights: Vec<u32> = (0..q as u32 - 1).map(|k| 1u32 << k).collect();
        weights.push((n_categories - (1usize << (q - 1))) as u32);
        Self { n_categories, weights }
    }

    /// Number of bits per discount variable.
    pub fn n_bits(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[u32] {
        &self.weights
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    /// Decodes a bit pattern into a category index. Total: every pattern of
    /// the right length maps into the grid.
    pub fn decode_index(&self, bits: &[u8]) -> Result<usize> {
        if bits.len() != self.n_bits() {
            return Err(DspError::LengthMismatch { expected: self.n_bits(), got: bits.len() });
        }
        let idx: u32 = bits
            .iter()
            .zip(&self.weights)
            .map(|(&b, &w)| {
                debug_assert!(b <= 1, "bits must be 0 or 1");
                b as u32 * w
            })
            .sum();
        debug_assert!((idx as usize) < self.n_categories);
        Ok(idx as usize)
    }

    /// Decodes a bit pattern into the discount value; the result is an
    /// exact grid member.
    pub fn decode_value(&self, bits: &[u8], scheme: &DiscountScheme) -> Result<f64> {
        assert_eq!(scheme.n_categories(), self.n_categories);
        Ok(scheme.value(self.decode_index(bits)?))
    }

    /// Canonical preimage of a category index: the pattern whose
    /// little-endian integer value (bit k weighs 2^k) is smallest.
    pub fn encode_index(&self, index: usize) -> Result<Vec<u8>> {
        if index >= self.n_categories {
            return Err(DspError::NotInZ { value: index as f64 });
        }
        let q = self.n_bits();
        for pattern in 0u32..(1 << q) {
            let bits: Vec<u8> = (0..q).map(|k| ((pattern >> k) & 1) as u8).collect();
            if self.decode_index(&bits).unwrap() == index {
                return Ok(bits);
            }
        }
        unreachable!("encoding is surjective onto the grid");
    }

    /// Canonical preimage of a grid value (exact membership required).
    pub fn encode_value(&self, value: f64, scheme: &DiscountScheme) -> Result<Vec<u8>> {
        assert_eq!(scheme.n_categories(), self.n_categories);
        self.encode_index(scheme.index_of(value)?)
    }
}
