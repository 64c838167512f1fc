//! Synthetic sparse datasets: independent Bernoulli binary features with a
//! configurable per-coordinate activity law, labels from a planted weight
//! vector plus noise. Deterministic given the seed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::sparse::{Dataset, Example, SparseVec};

/// Per-coordinate activity probability law.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbLaw {
    /// p(k) drawn uniformly from [lo, hi].
    UniformRange { lo: f64, hi: f64 },
    /// p(k) = max(pmax·(k+1)^(−exponent), pmin): frequent head, rare tail.
    PowerLaw { exponent: f64, pmax: f64, pmin: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub n: usize,
    pub law: ProbLaw,
    pub task: LossKind,
    /// Squared: standard deviation of additive Gaussian label noise.
    /// Logistic: probability of flipping the planted sign.
    pub noise: f64,
    /// Standard deviation of the planted weights.
    pub weight_scale: f64,
    pub seed: u64,
}

pub struct Synthetic {
    pub data: Dataset,
    pub true_weights: Vec<f64>,
    pub target_p: Vec<f64>,
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Synthetic> {
    if cfg.dim == 0 || cfg.n == 0 {
        return Err(Error::InvalidConfig("synthetic data needs dim ≥ 1 and n ≥ 1".into()));
    }
    if cfg.noise < 0.0 {
        return Err(Error::InvalidConfig("noise must be nonnegative".into()));
    }
    let target_p: Vec<f64> = match cfg.law {
        ProbLaw::UniformRange { lo, hi } => {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "uniform probability range [{lo}, {hi}] invalid"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            (0..cfg.dim).map(|_| rng.random_range(lo..=hi)).collect()
        }
        ProbLaw::PowerLaw { exponent, pmax, pmin } => {
            if !(0.0 < pmin && pmin <= pmax && pmax <= 1.0 && exponent >= 0.0) {
                return Err(Error::InvalidConfig("power law parameters invalid".into()));
            }
            (0..cfg.dim)
                .map(|k| (pmax * ((k + 1) as f64).powf(-exponent)).max(pmin))
                .collect()
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let true_weights: Vec<f64> = (0..cfg.dim)
        .map(|_| cfg.weight_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();

    rng.set_stream(3);
    let mut examples = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let mut pairs: Vec<(u32, f64)> = Vec::new();
        let mut margin = 0.0;
        for (k, &pk) in target_p.iter().enumerate() {
            if rng.random_bool(pk) {
                pairs.push((k as u32, 1.0));
                margin += true_weights[k];
            }
        }
        let label = match cfg.task {
            LossKind::Squared => margin + cfg.noise * rng.sample::<f64, _>(StandardNormal),
            LossKind::Logistic => {
                let sign = if margin >= 0.0 { 1.0 } else { -1.0 };
                if cfg.noise > 0.0 && rng.random_bool(cfg.noise.min(1.0)) {
                    -sign
                } else {
                    sign
                }
            }
        };
        examples.push(Example { features: SparseVec::from_pairs(&pairs)?, label });
    }

    Ok(Synthetic {
        data: Dataset::new(examples, cfg.dim),
        true_weights,
        target_p,
    })
}
