//! Moments of the support-restricted average, with independent oracles.
//!
//! Let Z₁..Z_N be i.i.d. draws of a scalar law that is zero with probability
//! 1−p, and define the averaged value
//!
//! ```text
//! A := 0                         if every Zᵢ = 0,
//! A := (Σᵢ Zᵢ) / #{i : Zᵢ ≠ 0}   otherwise.
//! ```
//!
//! This is exactly what the support-aware merge rule computes per coordinate,
//! so its closed-form mean/second moment (and the simpler upper bounds used by
//! step-size analysis) are implemented here together with a brute-force
//! enumeration oracle and a Monte Carlo check against the reconditioned
//! full gradient. The closed forms:
//!
//! * `E[A] = q/p · E[Z]` with `q := 1−(1−p)^N`;
//! * `E[A²] = S·(E[Z²]/p − E[Z]²/p²) + q·E[Z]²/p²` where
//!   `S := Σ_{i=1}^{N} C(N,i) pⁱ(1−p)^{N−i} / i`;
//! * simple bound `E[A²] ≤ q²/p²·E[Z]² + q/p·E[Z²]`;
//! * for Np ≥ 5, `E[A²] ≤ 5q·E[Z²]/(Np²) + q·E[Z]²/p²`, built on
//!   `E[1/M | M>0] ≤ 5/(Np)` for a binomial count M.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{cbp_scale, BatchGradient, MergeRule};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::sparse::{Dataset, FeatureStats};

/// Discrete scalar law; the zero atom must be listed explicitly whenever
/// P(Z=0) > 0.
#[derive(Debug, Clone)]
pub struct DiscreteLaw {
    values: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteLaw {
    pub fn new(atoms: &[(f64, f64)]) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidInput("law needs at least one atom".into()));
        }
        let mut total = 0.0;
        for &(v, pr) in atoms {
            if !v.is_finite() || !pr.is_finite() || pr < 0.0 {
                return Err(Error::InvalidInput(format!("bad atom ({v}, {pr})")));
            }
            total += pr;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "atom probabilities sum to {total}, not 1"
            )));
        }
        Ok(DiscreteLaw {
            values: atoms.iter().map(|a| a.0).collect(),
            probs: atoms.iter().map(|a| a.1).collect(),
        })
    }

    pub fn atoms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values.iter().zip(&self.probs).map(|(&v, &p)| (v, p))
    }

    pub fn mean(&self) -> f64 {
        self.atoms().map(|(v, p)| v * p).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.atoms().map(|(v, p)| v * v * p).sum()
    }

    /// p = P(Z ≠ 0).
    pub fn nonzero_prob(&self) -> f64 {
        self.atoms().filter(|&(v, _)| v != 0.0).map(|(_, p)| p).sum()
    }
}

fn require_active(law: &DiscreteLaw) -> Result<f64> {
    let p = law.nonzero_prob();
    if p <= 0.0 {
        return Err(Error::InvalidInput(
            "law is zero almost surely (p = 0)".into(),
        ));
    }
    Ok(p)
}

/// q = 1 − (1−p)^n, the probability that at least one of n draws is nonzero.
fn at_least_one(p: f64, n: u32) -> f64 {
    if p >= 1.0 {
        1.0
    } else {
        -libm::expm1(n as f64 * libm::log1p(-p))
    }
}

/// Σ_{i=1..n} C(n,i) pⁱ (1−p)^{n−i} · weight(i).
///
/// Uses a multiplicative pmf recurrence for n ≤ 64, running from whichever
/// endpoint term is representable; switches to log-gamma per-term evaluation
/// for larger n (overflow/underflow safety).
pub fn binomial_weighted_sum<F: Fn(u32) -> f64>(n: u32, p: f64, weight: F) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("need n ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(weight(n));
    }
    let nf = n as f64;
    if n <= 64 {
        let up_start = libm::log1p(-p) * nf; // ln (1−p)^n
        let down_start = p.ln() * nf; // ln p^n
        let mut acc = 0.0;
        if up_start >= down_start {
            // Ascend from i = 0.
            let mut term = (1.0 - p).powi(n as i32);
            for i in 0..n {
                term *= (nf - i as f64) / (i as f64 + 1.0) * (p / (1.0 - p));
                acc += term * weight(i + 1);
            }
        } else {
            // Descend from i = n.
            let mut term = p.powi(n as i32);
            acc += term * weight(n);
            for i in (1..n).rev() {
                term *= ((i + 1) as f64) / (nf - i as f64) * ((1.0 - p) / p);
                acc += term * weight(i);
            }
        }
        Ok(acc)
    } else {
        let ln_p = p.ln();
        let ln_1p = libm::log1p(-p);
        let ln_fact_n = libm::lgamma(nf + 1.0);
        let mut acc = 0.0;
        for i in 1..=n {
            let fi = i as f64;
            let ln_term = ln_fact_n - libm::lgamma(fi + 1.0) - libm::lgamma(nf - fi + 1.0)
                + fi * ln_p
                + (nf - fi) * ln_1p;
            acc += ln_term.exp() * weight(i);
        }
        Ok(acc)
    }
}

/// E[A] = q/p · E[Z].
pub fn averaged_nonzero_mean(law: &DiscreteLaw, n: u32) -> Result<f64> {
    let p = require_active(law)?;
    if n == 0 {
        return Err(Error::InvalidInput("need n ≥ 1".into()));
    }
    Ok(at_least_one(p, n) / p * law.mean())
}

/// Exact E[A²] = S·(E[Z²]/p − E[Z]²/p²) + q·E[Z]²/p² with
/// S = Σ C(n,i)pⁱ(1−p)^{n−i}/i.
pub fn averaged_nonzero_second_moment(law: &DiscreteLaw, n: u32) -> Result<f64> {
    let p = require_active(law)?;
    let s = binomial_weighted_sum(n, p, |i| 1.0 / i as f64)?;
    let q = at_least_one(p, n);
    let ez = law.mean();
    let ez2 = law.second_moment();
    Ok(s * (ez2 / p - ez * ez / (p * p)) + q * ez * ez / (p * p))
}

/// Simple upper bound q²/p²·E[Z]² + q/p·E[Z²] (≥ the exact second moment).
pub fn averaged_nonzero_second_moment_bound(law: &DiscreteLaw, n: u32) -> Result<f64> {
    let p = require_active(law)?;
    if n == 0 {
        return Err(Error::InvalidInput("need n ≥ 1".into()));
    }
    let q = at_least_one(p, n);
    let ez = law.mean();
    let ez2 = law.second_moment();
    Ok(q * q / (p * p) * ez * ez + q / p * ez2)
}

/// Sharper bound for well-covered coordinates (requires n·p ≥ 5):
/// 5q·E[Z²]/(n·p²) + q·E[Z]²/p².
pub fn averaged_nonzero_second_moment_bound_np5(law: &DiscreteLaw, n: u32) -> Result<f64> {
    let p = require_active(law)?;
    if (n as f64) * p < 5.0 {
        return Err(Error::InvalidInput(format!(
            "n·p = {} < 5; the sharpened bound needs n·p ≥ 5",
            n as f64 * p
        )));
    }
    let q = at_least_one(p, n);
    let ez = law.mean();
    let ez2 = law.second_moment();
    Ok(5.0 * q * ez2 / (n as f64 * p * p) + q * ez * ez / (p * p))
}

/// E[1/M | M > 0] for M ~ Binomial(n, p), evaluated exactly.
/// Sharpened-bound support: this is ≤ 5/(n·p) whenever n·p ≥ 5.
pub fn expected_inverse_active_count(p: f64, n: u32) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!("probability {p} outside (0, 1]")));
    }
    let s = binomial_weighted_sum(n, p, |i| 1.0 / i as f64)?;
    Ok(s / at_least_one(p, n))
}

/// Exact moments of A by enumerating all |atoms|^n outcome tuples.
/// Guarded by `cap` (default guard used by callers: 10^7 states).
pub fn brute_force_moments(law: &DiscreteLaw, n: u32, cap: u128) -> Result<(f64, f64)> {
    let k = law.values.len() as u128;
    let states = k.checked_pow(n).ok_or(Error::EnumerationTooLarge {
        states: u128::MAX,
        cap,
    })?;
    if states > cap {
        return Err(Error::EnumerationTooLarge { states, cap });
    }
    let mut idx = vec![0usize; n as usize];
    let mut mean = 0.0;
    let mut m2 = 0.0;
    loop {
        let mut prob = 1.0;
        let mut sum = 0.0;
        let mut nonzero = 0u32;
        for &i in &idx {
            prob *= law.probs[i];
            let v = law.values[i];
            sum += v;
            if v != 0.0 {
                nonzero += 1;
            }
        }
        if nonzero > 0 {
            let a = sum / nonzero as f64;
            mean += prob * a;
            m2 += prob * a * a;
        }
        // Odometer increment.
        let mut pos = 0;
        loop {
            if pos == idx.len() {
                return Ok((mean, m2));
            }
            idx[pos] += 1;
            if idx[pos] < law.values.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// One coordinate's Monte Carlo comparison against the reconditioned mean.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub coord: usize,
    /// cbp_scale(p(k), B) · F'(w)(k).
    pub expected: f64,
    pub mean: f64,
    pub std_err: f64,
}

impl CoordCheck {
    /// |mean − expected| in standard-error units (0 if both exact-equal).
    pub fn sigmas(&self) -> f64 {
        let diff = (self.mean - self.expected).abs();
        if self.std_err > 0.0 {
            diff / self.std_err
        } else if diff <= 1e-12 * (1.0 + self.expected.abs()) {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone)]
pub struct MergeExpectationReport {
    pub checks: Vec<CoordCheck>,
    pub trials: u64,
    pub batch: u32,
}

impl MergeExpectationReport {
    pub fn fraction_within(&self, sigmas: f64) -> f64 {
        if self.checks.is_empty() {
            return 1.0;
        }
        let ok = self.checks.iter().filter(|c| c.sigmas() <= sigmas).count();
        ok as f64 / self.checks.len() as f64
    }

    pub fn max_sigmas(&self) -> f64 {
        self.checks.iter().map(|c| c.sigmas()).fold(0.0, f64::max)
    }
}

/// Resamples batches at fixed `w`, merges with the support-aware rule, and
/// reports the per-coordinate empirical mean against the reconditioned full
/// gradient `cbp_scale(p(k), B)·F'(w)(k)`. Deterministic in `seed`; trials
/// consume independent RNG streams in fixed chunks.
pub fn monte_carlo_merge_expectation(
    data: &Dataset,
    kind: LossKind,
    stats: &FeatureStats,
    w: &[f64],
    b: u32,
    trials: u64,
    seed: u64,
) -> Result<MergeExpectationReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if b == 0 || trials == 0 {
        return Err(Error::InvalidInput("need batch ≥ 1 and trials ≥ 1".into()));
    }
    let d = data.dim();
    let n = data.len();

    // Full-data mean gradient (data term only).
    let mut full = vec![0.0f64; d];
    for ex in data.examples() {
        let scalar = kind.derivative(ex.features.dot(w), ex.label);
        for (k, v) in ex.features.iter() {
            full[k] += scalar * v;
        }
    }
    for g in &mut full {
        *g /= n as f64;
    }

    let mut sums = vec![0.0f64; d];
    let mut sumsq = vec![0.0f64; d];
    let mut bg = BatchGradient::new(d);
    let mut merged: Vec<(u32, f64)> = Vec::new();

    const CHUNK: u64 = 1 << 16;
    let mut done = 0u64;
    let mut chunk_id = 0u64;
    while done < trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk_id + 1);
        let this_chunk = CHUNK.min(trials - done);
        for _ in 0..this_chunk {
            bg.clear();
            for _ in 0..b {
                let ex = data.example(rng.random_range(0..n));
                let scalar = kind.derivative(ex.features.dot(w), ex.label);
                bg.accumulate(scalar, &ex.features);
            }
            bg.merge_into(MergeRule::Adabatch, None, &mut merged)?;
            for &(k, v) in &merged {
                sums[k as usize] += v;
                sumsq[k as usize] += v * v;
            }
        }
        done += this_chunk;
        chunk_id += 1;
    }

    let t = trials as f64;
    let mut checks = Vec::new();
    for k in 0..d {
        let p = stats.p(k);
        if p <= 0.0 {
            continue;
        }
        let mean = sums[k] / t;
        let var = (sumsq[k] / t - mean * mean).max(0.0);
        let std_err = (var / t).sqrt();
        let expected = cbp_scale(p, b)? * full[k];
        checks.push(CoordCheck { coord: k, expected, mean, std_err });
    }
    Ok(MergeExpectationReport { checks, trials, batch: b })
}
