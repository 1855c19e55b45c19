//! Nested hierarchical mask chains and their application to feature vectors.
//!
//! Bit polarity: a `true` bit in a chain mask means the coordinate is
//! **masked** (replaced by the mask token). `M_0` is all-`true` (the input is
//! fully hidden, the most uncertain view) and `M_L` is all-`false` (the raw
//! input). Each `M_i = M_{i-1} ⊙ R_{i-1}` keeps a random subset of the
//! previous level's masked coordinates, so the masked set shrinks as `i`
//! grows and `Z_{M_{i+1}}` is the less-masked, inner view of `Z_{M_i}`.
//!
//! [`apply_mask`] takes a *visibility* pattern (`true` = keep `x_i`); use
//! [`MaskChain::visible`] to get the complement of a chain level.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskChain {
    masks: Vec<Vec<bool>>,
    seed: u64,
}

impl MaskChain {
    /// Number of levels `L`; the chain holds `L + 1` masks.
    pub fn levels(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.masks[0].len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Masked-coordinate pattern of level `i`.
    pub fn masked(&self, i: usize) -> &[bool] {
        &self.masks[i]
    }

    /// Visibility pattern of level `i` (complement of [`MaskChain::masked`]).
    pub fn visible(&self, i: usize) -> Vec<bool> {
        self.masks[i].iter().map(|m| !m).collect()
    }

    pub fn masked_count(&self, i: usize) -> usize {
        self.masks[i].iter().filter(|m| **m).count()
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }
}

/// Builds `M_0 .. M_L` for a `d`-dimensional input.
///
/// `keep_fractions[i - 1]` is the probability that a coordinate masked at
/// level `i - 1` stays masked at level `i`, for the intermediate levels
/// `i = 1 .. L - 1`.
pub fn build_chain(
    d: usize,
    levels: usize,
    keep_fractions: &[f64],
    seed: u64,
) -> Result<MaskChain> {
    if d == 0 {
        return Err(Error::invalid("mask dimension must be at least 1"));
    }
    if levels == 0 {
        return Err(Error::invalid("mask chain needs L >= 1"));
    }
    if keep_fractions.len() != levels - 1 {
        return Err(Error::invalid(format!(
            "L = {levels} needs {} keep fractions, got {}",
            levels - 1,
            keep_fractions.len()
        )));
    }
    if let Some(f) = keep_fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(Error::invalid(format!("keep fraction {f} outside (0, 1)")));
    }
    if d < levels {
        log::warn!("mask dimension {d} < L = {levels}: supports cannot all shrink strictly");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(levels + 1);
    masks.push(vec![true; d]);
    for &keep in keep_fractions {
        let prev = masks.last().expect("chain starts non-empty");
        let next: Vec<bool> = prev
            .iter()
            .map(|&m| {
                let r: f64 = rng.random();
                m && r < keep
            })
            .collect();
        masks.push(next);
    }
    masks.push(vec![false; d]);
    Ok(MaskChain { masks, seed })
}

/// Masks exactly `round(ratio * d)` coordinates chosen uniformly. Returns a
/// visibility pattern.
pub fn random_visibility<R: Rng + ?Sized>(d: usize, ratio: f64, rng: &mut R) -> Vec<bool> {
    let n_masked = ((ratio.clamp(0.0, 1.0) * d as f64).round() as usize).min(d);
    let mut visible = vec![true; d];
    let mut idx: Vec<usize> = (0..d).collect();
    idx.shuffle(rng);
    for &i in &idx[..n_masked] {
        visible[i] = false;
    }
    visible
}

/// `out_i = x_i` where `visible_i`, `mask_token_i` elsewhere.
pub fn apply_mask(x: &[f64], visible: &[bool], mask_token: &[f64]) -> Result<Vec<f64>> {
    check_dim(x.len(), visible.len())?;
    check_dim(x.len(), mask_token.len())?;
    Ok(x.iter()
        .zip(visible)
        .zip(mask_token)
        .map(|((&xi, &v), &ti)| if v { xi } else { ti })
        .collect())
}
