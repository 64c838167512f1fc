//! Constant-step-size mini-batch SGD driver with pluggable gradient merging,
//! an Adagrad baseline, per-rule stability step-size bounds, and geometric
//! tail averaging of the iterates.
//!
//! All B gradients of an iteration are evaluated at the pre-update weights
//! (synchronous semantics); the merged result and the ridge gradient are then
//! applied together. Batch composition at iteration t depends only on
//! `(seed, t)` — each iteration draws from its own RNG stream — so parallel
//! drivers can reproduce the exact sample sequence without sharing state.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{batch_activity, cbp_scale, recondition_scales, BatchGradient, MergeRule};
use crate::error::{Error, Result};
use crate::loss::{gradient_variance, CurvatureConstants, LossKind, Regularizer};
use crate::metrics::{Evaluator, RunMetrics};
use crate::sparse::{Dataset, FeatureStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Independent draws with replacement each iteration (the default; the
    /// moment identities assume it).
    IidReplacement,
    /// Random reshuffle every pass; batches walk the permutation.
    ShuffledEpochs,
}

#[derive(Debug, Clone, Copy)]
pub struct AdagradConfig {
    /// Step scale α.
    pub alpha: f64,
    /// Damping ε under the square root.
    pub epsilon: f64,
    /// Divide by the accumulator excluding the current gradient (the
    /// alternative convention); the default includes it.
    pub past_only: bool,
}

impl AdagradConfig {
    pub fn new(alpha: f64) -> Self {
        AdagradConfig { alpha, epsilon: 0.0, past_only: false }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum UpdateRule {
    Merge(MergeRule),
    Adagrad(AdagradConfig),
}

impl UpdateRule {
    pub fn name(&self) -> &'static str {
        match self {
            UpdateRule::Merge(MergeRule::Minibatch) => "minibatch",
            UpdateRule::Merge(MergeRule::Adabatch) => "adabatch",
            UpdateRule::Merge(MergeRule::Cbp) => "cbp",
            UpdateRule::Merge(MergeRule::InvP) => "inv-p",
            UpdateRule::Adagrad(_) => "adagrad",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgdConfig {
    /// Step size γ (Adagrad uses `AdagradConfig::alpha` instead). γ = 0 is
    /// allowed and leaves the weights unchanged.
    pub gamma: f64,
    pub batch: usize,
    pub rule: UpdateRule,
    /// Total samples to process; iterations = budget / batch (floor).
    pub sample_budget: u64,
    pub seed: u64,
    pub sampling: Sampling,
    pub reg: Regularizer,
    /// When set, maintain a running tail average of the iterates with this
    /// geometric decay (see [`tail_decay`]).
    pub average_decay: Option<f64>,
}

impl SgdConfig {
    pub fn new(gamma: f64, batch: usize, rule: UpdateRule, sample_budget: u64, seed: u64) -> Self {
        SgdConfig {
            gamma,
            batch,
            rule,
            sample_budget,
            seed,
            sampling: Sampling::IidReplacement,
            reg: Regularizer::none(),
            average_decay: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidConfig(format!("step size {} invalid", self.gamma)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.sample_budget < self.batch as u64 {
            return Err(Error::InvalidConfig(format!(
                "sample budget {} smaller than one batch of {}",
                self.sample_budget, self.batch
            )));
        }
        if let UpdateRule::Adagrad(a) = self.rule {
            if !a.alpha.is_finite() || a.alpha <= 0.0 {
                return Err(Error::InvalidConfig(format!("adagrad alpha {} invalid", a.alpha)));
            }
            if !a.epsilon.is_finite() || a.epsilon < 0.0 {
                return Err(Error::InvalidConfig(format!("adagrad epsilon {} invalid", a.epsilon)));
            }
        }
        if let Some(rho) = self.average_decay {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::InvalidConfig(format!("averaging decay {rho} outside (0, 1]")));
            }
        }
        if self.reg.l2 < 0.0 {
            return Err(Error::InvalidConfig("negative l2 strength".into()));
        }
        Ok(())
    }

    pub fn iterations(&self) -> u64 {
        self.sample_budget / self.batch as u64
    }

    pub fn snapshot(&self) -> serde_json::Value {
        let (adagrad_eps, adagrad_past_only) = match self.rule {
            UpdateRule::Adagrad(a) => (Some(a.epsilon), Some(a.past_only)),
            _ => (None, None),
        };
        serde_json::json!({
            "rule": self.rule.name(),
            "gamma": match self.rule {
                UpdateRule::Adagrad(a) => a.alpha,
                _ => self.gamma,
            },
            "batch": self.batch,
            "sample_budget": self.sample_budget,
            "seed": self.seed,
            "sampling": match self.sampling {
                Sampling::IidReplacement => "iid",
                Sampling::ShuffledEpochs => "shuffled-epochs",
            },
            "l2": self.reg.l2,
            "adagrad_epsilon": adagrad_eps,
            "adagrad_past_only": adagrad_past_only,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub w: Vec<f64>,
    pub samples_seen: u64,
    pub iter: u64,
    /// Per-coordinate Σ g², present only for Adagrad.
    pub adagrad_acc: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivergencePoint {
    pub iteration: u64,
    pub samples_seen: u64,
}

pub struct SgdDriver<'a> {
    data: &'a Dataset,
    kind: LossKind,
    stats: &'a FeatureStats,
    cfg: SgdConfig,
    scales: Option<Vec<f64>>,
    state: TrainState,
    scratch: BatchGradient,
    merged: Vec<(u32, f64)>,
    epoch_order: Vec<usize>,
    epoch_pos: usize,
    shuffle_rng: ChaCha8Rng,
}

impl<'a> SgdDriver<'a> {
    pub fn new(
        data: &'a Dataset,
        kind: LossKind,
        stats: &'a FeatureStats,
        cfg: SgdConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if stats.probabilities().len() != data.dim() {
            return Err(Error::InvalidInput(format!(
                "stats cover {} coordinates, dataset has {}",
                stats.probabilities().len(),
                data.dim()
            )));
        }
        let scales = match cfg.rule {
            UpdateRule::Merge(r) if r.needs_scales() => {
                Some(recondition_scales(r, stats, cfg.batch as u32)?)
            }
            _ => None,
        };
        let adagrad_acc =
            matches!(cfg.rule, UpdateRule::Adagrad(_)).then(|| vec![0.0; data.dim()]);
        let n = data.len();
        // Stream 0 drives epoch shuffling; batch draws use streams iter+1.
        let shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(SgdDriver {
            data,
            kind,
            stats,
            scratch: BatchGradient::new(data.dim()),
            merged: Vec::new(),
            state: TrainState {
                w: vec![0.0; data.dim()],
                samples_seen: 0,
                iter: 0,
                adagrad_acc,
            },
            scales,
            cfg,
            epoch_order: (0..n).collect(),
            epoch_pos: n,
            shuffle_rng,
        })
    }

    /// Overrides the (default zero) starting point.
    pub fn with_weights(mut self, w: Vec<f64>) -> Result<Self> {
        if w.len() != self.data.dim() {
            return Err(Error::InvalidInput(format!(
                "start point has {} coordinates, dataset has {}",
                w.len(),
                self.data.dim()
            )));
        }
        self.state.w = w;
        Ok(self)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn weights(&self) -> &[f64] {
        &self.state.w
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// Example indices for the next iteration. With i.i.d. sampling the
    /// result is a pure function of `(seed, iter)`.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let b = self.cfg.batch;
        let n = self.data.len();
        match self.cfg.sampling {
            Sampling::IidReplacement => batch_indices(self.cfg.seed, self.state.iter, b, n),
            Sampling::ShuffledEpochs => {
                let mut out = Vec::with_capacity(b);
                for _ in 0..b {
                    if self.epoch_pos == self.epoch_order.len() {
                        self.epoch_order.shuffle(&mut self.shuffle_rng);
                        self.epoch_pos = 0;
                    }
                    out.push(self.epoch_order[self.epoch_pos]);
                    self.epoch_pos += 1;
                }
                out
            }
        }
    }

    /// One synchronous step over `batch`: gradients at the current weights,
    /// merged per the configured rule, applied together with the ridge term.
    pub fn step(&mut self, batch: &[usize]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        self.scratch.clear();
        for &i in batch {
            if i >= self.data.len() {
                return Err(Error::InvalidInput(format!("example index {i} out of range")));
            }
            let ex = self.data.example(i);
            let slope = self.kind.derivative(ex.features.dot(&self.state.w), ex.label);
            self.scratch.accumulate(slope, &ex.features);
        }
        let finite = match self.cfg.rule {
            UpdateRule::Merge(rule) => self.apply_merge(rule)?,
            UpdateRule::Adagrad(acfg) => self.apply_adagrad(acfg, batch.len() as f64),
        };
        if !finite {
            return Err(Error::Divergence {
                iteration: self.state.iter,
                samples_seen: self.state.samples_seen,
            });
        }
        self.state.iter += 1;
        self.state.samples_seen += batch.len() as u64;
        Ok(())
    }

    fn apply_merge(&mut self, rule: MergeRule) -> Result<bool> {
        self.scratch.merge_into(rule, self.scales.as_deref(), &mut self.merged)?;
        let gamma = self.cfg.gamma;
        let mut finite = true;
        if self.cfg.reg.l2 > 0.0 {
            let l2 = self.cfg.reg.l2;
            for k in 0..self.state.w.len() {
                let factor = 1.0 - gamma * l2 * self.cfg.reg.weight(k, Some(self.stats));
                let v = self.state.w[k] * factor;
                finite &= v.is_finite();
                self.state.w[k] = v;
            }
        }
        for &(k, g) in &self.merged {
            let v = self.state.w[k as usize] - gamma * g;
            finite &= v.is_finite();
            self.state.w[k as usize] = v;
        }
        Ok(finite)
    }

    fn apply_adagrad(&mut self, acfg: AdagradConfig, bsize: f64) -> bool {
        let l2 = self.cfg.reg.l2;
        let TrainState { w, adagrad_acc, .. } = &mut self.state;
        let acc = adagrad_acc.as_mut().expect("adagrad accumulator");
        let mut finite = true;
        if l2 > 0.0 {
            // Ridge makes every nonzero coordinate carry gradient mass.
            for k in 0..w.len() {
                let g = self.scratch.sum(k) / bsize
                    + l2 * self.cfg.reg.weight(k, Some(self.stats)) * w[k];
                finite &= adagrad_coordinate(w, acc, k, g, &acfg);
            }
        } else {
            for &k in self.scratch.touched() {
                let k = k as usize;
                finite &= adagrad_coordinate(w, acc, k, self.scratch.sum(k) / bsize, &acfg);
            }
        }
        finite
    }
}

/// One Adagrad coordinate update; a zero denominator skips the movement but
/// (in past-only mode) still records the squared gradient. Returns whether
/// the coordinate stayed finite.
fn adagrad_coordinate(
    w: &mut [f64],
    acc: &mut [f64],
    k: usize,
    g: f64,
    acfg: &AdagradConfig,
) -> bool {
    if acfg.past_only {
        let denom = (acfg.epsilon + acc[k]).sqrt();
        if denom > 0.0 {
            w[k] -= acfg.alpha * g / denom;
        }
        acc[k] += g * g;
    } else {
        acc[k] += g * g;
        let denom = (acfg.epsilon + acc[k]).sqrt();
        if denom > 0.0 {
            w[k] -= acfg.alpha * g / denom;
        }
    }
    w[k].is_finite() && acc[k].is_finite()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: Vec<f64>,
    /// Tail-averaged iterate, when `average_decay` was set and at least one
    /// step completed.
    pub averaged: Option<Vec<f64>>,
    pub metrics: RunMetrics,
    /// `Some` when training stopped early on non-finite weights or objective;
    /// metrics then cover the iterations up to that point.
    pub divergence: Option<DivergencePoint>,
}

/// Runs `budget / B` iterations, evaluating at the given sample counts.
/// Wall-clock excludes evaluation time. Deterministic given the seed.
pub fn train(
    data: &Dataset,
    kind: LossKind,
    stats: &FeatureStats,
    cfg: &SgdConfig,
    eval: &Evaluator,
    schedule: &[u64],
) -> Result<TrainOutcome> {
    let mut driver = SgdDriver::new(data, kind, stats, cfg.clone())?;
    let mut metrics = RunMetrics::new(format!("sgd/{}", cfg.rule.name()), cfg.snapshot());
    let mut schedule: Vec<u64> = schedule.to_vec();
    schedule.sort_unstable();
    schedule.dedup();
    let mut next_cp = 0usize;
    let mut running_avg = cfg.average_decay.map(|_| (vec![0.0f64; data.dim()], 0.0f64));
    let mut divergence = None;
    let mut train_secs = 0.0;

    while next_cp < schedule.len() && schedule[next_cp] == 0 {
        metrics.checkpoints.push(eval.checkpoint(0, 0.0, driver.weights())?);
        next_cp += 1;
    }

    let iterations = cfg.iterations();
    let mut clock = Instant::now();
    for _ in 0..iterations {
        let batch = driver.next_batch();
        match driver.step(&batch) {
            Ok(()) => {}
            Err(Error::Divergence { iteration, samples_seen }) => {
                divergence = Some(DivergencePoint { iteration, samples_seen });
                break;
            }
            Err(e) => return Err(e),
        }
        if let (Some((num, den)), Some(rho)) = (running_avg.as_mut(), cfg.average_decay) {
            for (nk, wk) in num.iter_mut().zip(driver.weights()) {
                *nk = rho * *nk + wk;
            }
            *den = rho * *den + 1.0;
        }
        let seen = driver.state().samples_seen;
        if next_cp < schedule.len() && seen >= schedule[next_cp] {
            train_secs += clock.elapsed().as_secs_f64();
            while next_cp < schedule.len() && seen >= schedule[next_cp] {
                next_cp += 1;
            }
            let cp = eval.checkpoint(seen, train_secs, driver.weights())?;
            let bad = !cp.objective.is_finite();
            metrics.checkpoints.push(cp);
            if bad {
                divergence = Some(DivergencePoint {
                    iteration: driver.state().iter,
                    samples_seen: seen,
                });
                break;
            }
            clock = Instant::now();
        }
    }
    train_secs += clock.elapsed().as_secs_f64();

    let seen = driver.state().samples_seen;
    if divergence.is_none()
        && metrics.checkpoints.last().map_or(true, |c| c.samples < seen)
    {
        metrics.checkpoints.push(eval.checkpoint(seen, train_secs, driver.weights())?);
    }
    metrics.train_seconds = train_secs;
    metrics.samples_per_sec =
        if train_secs > 0.0 { seen as f64 / train_secs } else { 0.0 };
    if divergence.is_none() {
        metrics.sigma2 = Some(gradient_variance(data, kind, driver.weights())?);
    }
    let averaged = running_avg.and_then(|(num, den)| {
        (den > 0.0).then(|| num.into_iter().map(|v| v / den).collect())
    });
    Ok(TrainOutcome {
        weights: driver.state.w,
        averaged,
        metrics,
        divergence,
    })
}

/// Largest step size satisfying the per-rule stability inequality, written
/// in terms of the composite constants L and R² and the activity extremes.
pub fn max_stable_step(
    rule: MergeRule,
    consts: &CurvatureConstants,
    stats: &FeatureStats,
    batch: usize,
) -> Result<f64> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if !(consts.l.is_finite() && consts.r2.is_finite()) {
        return Err(Error::InvalidInput("non-finite curvature constants".into()));
    }
    let b = batch as f64;
    let (l, r2) = (consts.l, consts.r2);
    let denom = match rule {
        MergeRule::Minibatch => l * stats.pmax() + 2.0 * r2 / b,
        MergeRule::Adabatch => l + 2.0 * r2,
        MergeRule::InvP => l + 2.0 * r2 / (stats.pmin() * b),
        MergeRule::Cbp => {
            let activity = batch_activity(stats.pmax(), batch as u32)?;
            let scale = cbp_scale(stats.pmin(), batch as u32)?;
            l * activity * (1.0 - 1.0 / b) + 2.0 * scale * r2 / b
        }
    };
    if !(denom > 0.0) {
        return Err(Error::InvalidInput(format!(
            "degenerate stability denominator {denom}"
        )));
    }
    Ok(1.0 / denom)
}

/// Stability bound under the dense (activity-free) curvature condition
/// γ·[L(1−1/B) + 2R²/B] ≤ 1; coincides with the activity-rescaled rule's
/// bound at B = 1, where both reduce to 1/(2R²).
pub fn max_stable_step_dense(consts: &CurvatureConstants, batch: usize) -> Result<f64> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let b = batch as f64;
    let denom = consts.l * (1.0 - 1.0 / b) + 2.0 * consts.r2 / b;
    if !(denom > 0.0) {
        return Err(Error::InvalidInput(format!(
            "degenerate stability denominator {denom}"
        )));
    }
    Ok(1.0 / denom)
}

/// I.i.d.-with-replacement batch composition for iteration `iter`: a pure
/// function of `(seed, iter)`, shared by the sequential, variance-reduced,
/// and parallel drivers so that worker count never changes which examples
/// form a batch.
pub fn batch_indices(seed: u64, iter: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter + 1);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Decay factor 1 − γ·μ⁺/2 for geometric tail averaging.
pub fn tail_decay(gamma: f64, mu_pplus: f64) -> f64 {
    1.0 - gamma * mu_pplus / 2.0
}

/// Weighted tail average Σ ρ^{N−n} wₙ / Σ ρ^{N−n} with ρ = 1 − γ·μ⁺/2.
pub fn averaged_iterate(iterates: &[Vec<f64>], gamma: f64, mu_pplus: f64) -> Result<Vec<f64>> {
    if iterates.is_empty() {
        return Err(Error::InvalidInput("empty iterate log".into()));
    }
    let rho = tail_decay(gamma, mu_pplus);
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidConfig(format!("averaging decay {rho} outside (0, 1]")));
    }
    let dim = iterates[0].len();
    let mut num = vec![0.0f64; dim];
    let mut den = 0.0f64;
    for w in iterates {
        if w.len() != dim {
            return Err(Error::InvalidInput("iterate dimensions differ".into()));
        }
        for (nk, wk) in num.iter_mut().zip(w) {
            *nk = rho * *nk + wk;
        }
        den = rho * den + 1.0;
    }
    Ok(num.into_iter().map(|v| v / den).collect())
}
