//! Batch-gradient accumulation and per-coordinate merge rules.
//!
//! A batch of per-example gradients (each `scalar · x_b`) is folded into
//! per-coordinate partial sums and active counts. Three merge rules turn the
//! accumulator into one sparse update:
//!
//! * `Minibatch` — divide every coordinate sum by the batch size B;
//! * `Adabatch`  — divide each coordinate sum by the number of batch members
//!   whose support contains it, so rare features are not averaged down;
//! * `Cbp`/`InvP` — mini-batch average rescaled per coordinate by a
//!   deterministic factor of the activity probability p(k): `(1−(1−p)^B)/p`
//!   (matching the adabatch rule's expected update) or `1/p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{FeatureStats, SparseVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    Minibatch,
    Adabatch,
    Cbp,
    InvP,
}

impl MergeRule {
    pub fn needs_scales(self) -> bool {
        matches!(self, MergeRule::Cbp | MergeRule::InvP)
    }
}

/// Expected-coverage scale `(1 − (1−p)^B) / p`.
///
/// Computed as `-expm1(B·log1p(-p))/p` for accuracy at small p and large B.
/// Returns exactly 1 for B = 1 and for p = 1 so that degenerate cases stay
/// bit-exact. Lies in `[1, min(B, 1/p)]`.
pub fn cbp_scale(p: f64, b: u32) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "activity probability {p} outside (0, 1]"
        )));
    }
    if b == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    if b == 1 || p == 1.0 {
        return Ok(1.0);
    }
    Ok(-libm::expm1(b as f64 * libm::log1p(-p)) / p)
}

/// Probability of a coordinate with activity p appearing in a batch of B:
/// `1 − (1−p)^B`.
pub fn batch_activity(p: f64, b: u32) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "activity probability {p} outside (0, 1]"
        )));
    }
    if b == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    if p == 1.0 {
        return Ok(1.0);
    }
    Ok(-libm::expm1(b as f64 * libm::log1p(-p)))
}

/// Precomputed per-coordinate scales for the reconditioned rules. Coordinates
/// with p(k) = 0 get NaN markers; merging a batch that touches one fails with
/// a stats-mismatch error.
pub fn recondition_scales(rule: MergeRule, stats: &FeatureStats, b: u32) -> Result<Vec<f64>> {
    let mut scales = Vec::with_capacity(stats.probabilities().len());
    for &p in stats.probabilities() {
        if p == 0.0 {
            scales.push(f64::NAN);
        } else {
            let s = match rule {
                MergeRule::Cbp => cbp_scale(p, b)?,
                MergeRule::InvP => 1.0 / p,
                _ => 1.0,
            };
            scales.push(s);
        }
    }
    Ok(scales)
}

/// Per-coordinate partial sums and active counts for one batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    sums: Vec<f64>,
    counts: Vec<u32>,
    touched: Vec<u32>,
    accumulated: u32,
}

impl BatchGradient {
    pub fn new(dim: usize) -> Self {
        BatchGradient {
            sums: vec![0.0; dim],
            counts: vec![0; dim],
            touched: Vec::new(),
            accumulated: 0,
        }
    }

    /// Number of accumulated per-example gradients (the batch size B).
    pub fn batch_size(&self) -> u32 {
        self.accumulated
    }

    pub fn sum(&self, k: usize) -> f64 {
        self.sums[k]
    }

    /// |D_k|: how many batch members have coordinate k in their support.
    pub fn count(&self, k: usize) -> u32 {
        self.counts[k]
    }

    /// Coordinates touched by the batch, sorted.
    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    /// Resets for the next batch in O(touched).
    pub fn clear(&mut self) {
        for &k in &self.touched {
            self.sums[k as usize] = 0.0;
            self.counts[k as usize] = 0;
        }
        self.touched.clear();
        self.accumulated = 0;
    }

    /// Adds one per-example gradient `scalar · x`. Every support coordinate
    /// counts as active, even if `scalar` is zero: activity is a property of
    /// the support, not of the gradient value.
    pub fn accumulate(&mut self, scalar: f64, x: &SparseVec) {
        self.accumulated += 1;
        for (k, v) in x.iter() {
            if self.counts[k] == 0 {
                self.touched.push(k as u32);
            }
            self.counts[k] += 1;
            self.sums[k] += scalar * v;
        }
    }

    /// As `accumulate`, but each contribution is `scalar·v + extra(k)` on the
    /// support (used by variance-reduced updates that carry an anchored term).
    pub fn accumulate_with<F: FnMut(usize) -> f64>(
        &mut self,
        scalar: f64,
        x: &SparseVec,
        mut extra: F,
    ) {
        self.accumulated += 1;
        for (k, v) in x.iter() {
            if self.counts[k] == 0 {
                self.touched.push(k as u32);
            }
            self.counts[k] += 1;
            self.sums[k] += scalar * v + extra(k);
        }
    }

    /// Merges into `(coordinate, value)` pairs sorted by coordinate.
    /// `scales` is required for the reconditioned rules.
    pub fn merge(&self, rule: MergeRule, scales: Option<&[f64]>) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        self.merge_into(rule, scales, &mut out)?;
        Ok(out.into_iter().map(|(k, v)| (k as usize, v)).collect())
    }

    /// Allocation-free merge; appends sorted `(coordinate, value)` pairs.
    pub fn merge_into(
        &self,
        rule: MergeRule,
        scales: Option<&[f64]>,
        out: &mut Vec<(u32, f64)>,
    ) -> Result<()> {
        if self.accumulated == 0 {
            return Err(Error::InvalidInput("merge of an empty batch".into()));
        }
        if rule.needs_scales() && scales.is_none() {
            return Err(Error::InvalidConfig(format!(
                "{rule:?} merge needs per-coordinate scales"
            )));
        }
        out.clear();
        let b = self.accumulated as f64;
        let mut touched: Vec<u32> = self.touched.clone();
        touched.sort_unstable();
        for &k in &touched {
            let ku = k as usize;
            let value = match rule {
                MergeRule::Minibatch => self.sums[ku] / b,
                MergeRule::Adabatch => self.sums[ku] / self.counts[ku] as f64,
                MergeRule::Cbp | MergeRule::InvP => {
                    let s = scales.expect("checked above")[ku];
                    if s.is_nan() {
                        return Err(Error::StatsMismatch { coord: ku });
                    }
                    s * (self.sums[ku] / b)
                }
            };
            out.push((k, value));
        }
        Ok(())
    }
}
