use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::{ActionChunk, TokenChunk};
use crate::error::{Error, Result};

/// Uniform k-bin quantizer over `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Quantizer {
    pub fn new(bins: usize) -> Self {
        Quantizer { bins, lo: -1.0, hi: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::config("policy.num_bins", "need at least 2 bins"));
        }
        if !(self.lo < self.hi) {
            return Err(Error::config("quantizer", "lo must be below hi"));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    /// `clamp(floor((a − lo) / (hi − lo) · B), 0, B − 1)`.
    pub fn bin(&self, a: f64) -> Result<u32> {
        if !a.is_finite() {
            return Err(Error::NonFinite("quantize input".into()));
        }
        let raw = ((a - self.lo) / (self.hi - self.lo) * self.bins as f64).floor();
        Ok(raw.clamp(0.0, (self.bins - 1) as f64) as u32)
    }

    /// Bin centre `lo + (b + 0.5)(hi − lo)/B`.
    pub fn center(&self, b: u32) -> f64 {
        self.lo + (b as f64 + 0.5) * self.bin_width()
    }

    /// Every bin centre, in bin order.
    pub fn centers(&self) -> Vec<f64> {
        (0..self.bins as u32).map(|b| self.center(b)).collect()
    }
}

pub fn quantize(a: &ActionChunk, q: &Quantizer) -> Result<TokenChunk> {
    let cells = a.data().iter().map(|&v| q.bin(v).map(Some)).collect::<Result<Vec<_>>>()?;
    TokenChunk::from_cells(a.horizon(), a.action_dim(), cells)
}

pub fn dequantize(t: &TokenChunk, q: &Quantizer) -> Result<ActionChunk> {
    let data = t
        .cells()
        .iter()
        .map(|c| c.map(|b| q.center(b)).ok_or_else(|| Error::contract("dequantize of a masked token")))
        .collect::<Result<Vec<_>>>()?;
    ActionChunk::new(t.horizon(), t.action_dim(), data)
}

/// Dequantizes timesteps `0..rows` only; the rest are left at zero.
pub fn dequantize_rows(t: &TokenChunk, rows: usize, q: &Quantizer) -> Result<ActionChunk> {
    let mut out = ActionChunk::zeros(t.horizon(), t.action_dim());
    for r in 0..rows {
        for (o, c) in out.row_mut(r).iter_mut().zip(t.row(r)) {
            *o = q.center(c.ok_or_else(|| Error::contract(format!("timestep {r} still masked")))?);
        }
    }
    Ok(out)
}

/// Cosine training mask schedule `cos(πu/2)`, written as `sin(π(1 − u)/2)`
/// so both endpoints come out exact.
pub fn mask_ratio(u: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * (1.0 - u)).sin()
}

/// Number of positions masked at schedule point `u`.
pub fn mask_count(u: f64, total: usize) -> usize {
    ((mask_ratio(u) * total as f64).round() as usize).min(total)
}

/// Masks exactly `mask_count(u, H·A)` positions chosen uniformly.
pub fn apply_random_mask(tokens: &TokenChunk, u: f64, rng: &mut impl Rng) -> Result<TokenChunk> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::contract(format!("mask schedule point {u} outside [0, 1]")));
    }
    if !tokens.is_fully_unmasked() {
        return Err(Error::contract("random masking expects a fully unmasked chunk"));
    }
    let total = tokens.len();
    let mut out = tokens.clone();
    for i in sample(rng, total, mask_count(u, total)) {
        out.set(i, None);
    }
    Ok(out)
}
