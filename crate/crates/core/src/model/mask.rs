use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

use super::config::mask_count;

/// Masked patch indices of one sample, sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub n: usize,
    pub indices: Vec<usize>,
}

impl MaskSpec {
    /// Builds a mask from explicit indices; duplicates or out-of-range entries are rejected.
    pub fn from_indices(n: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid_arg(format!("mask indices must be distinct: {indices:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid_arg(format!("mask index {bad} out of range for N = {n}")));
        }
        Ok(Self { n, indices })
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.n];
        for &i in &self.indices {
            f[i] = true;
        }
        f
    }
}

/// Draws `round(r·N)` distinct indices uniformly.
pub fn make_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    if n < 2 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid_arg(format!("make_mask: need N >= 2 and 0 < r < 1, got N = {n}, r = {ratio}")));
    }
    let m = mask_count(n, ratio);
    MaskSpec::from_indices(n, sample(rng, n, m).into_vec())
}

/// Row flags for a batch laid out sample-major (`b·N + i`).
pub fn batch_flags(masks: &[MaskSpec]) -> Vec<bool> {
    masks.iter().flat_map(MaskSpec::flags).collect()
}

/// Flat row indices of every masked patch, sample-major then ascending.
pub fn batch_rows(masks: &[MaskSpec]) -> Vec<usize> {
    let mut offset = 0;
    let mut rows = Vec::new();
    for m in masks {
        rows.extend(m.indices.iter().map(|&i| offset + i));
        offset += m.n;
    }
    rows
}
