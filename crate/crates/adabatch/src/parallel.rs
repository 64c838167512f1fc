//! Parallel training on a shared weight vector: a batch-synchronous engine
//! (workers compute a batch of gradients against frozen weights, then apply
//! activity-rescaled updates concurrently) and a fully asynchronous,
//! lock-free baseline.
//!
//! The shared model stores each coordinate as an `AtomicU64` bit pattern, so
//! reads never observe torn values. Updates default to a compare-exchange
//! read-modify-write, which makes the synchronous engine's post-iteration
//! weights independent of the worker count up to floating-point summation
//! order; an opt-in racy mode uses plain stores instead, tolerating lost
//! updates the way asynchronous implementations traditionally do.
//!
//! Neither engine supports a ridge term: the dense decay would densify the
//! per-example writes. Configurations carrying one are rejected upstream.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Barrier;
use std::time::Instant;

use crate::aggregation::{recondition_scales, MergeRule};
use crate::error::{Error, Result};
use crate::loss::{gradient_variance, LossKind};
use crate::metrics::{Evaluator, RunMetrics};
use crate::sgd::{batch_indices, DivergencePoint};
use crate::sparse::{Dataset, FeatureStats, SparseVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParallelMode {
    /// Batch-synchronous: barriers separate gradient computation from update
    /// application; updates carry the activity rescaling (1−(1−p)^B)/p.
    WildAdabatch,
    /// Fully asynchronous single-sample updates, no barriers.
    Hogwild,
}

impl ParallelMode {
    pub fn name(self) -> &'static str {
        match self {
            ParallelMode::WildAdabatch => "wild-adabatch",
            ParallelMode::Hogwild => "hogwild",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParallelConfig {
    pub workers: usize,
    /// Batch size per synchronous iteration (ignored by the asynchronous
    /// mode, which processes one example per update).
    pub batch: usize,
    pub gamma: f64,
    pub mode: ParallelMode,
    pub sample_budget: u64,
    pub seed: u64,
    /// Apply updates with plain load/store instead of read-modify-write.
    pub racy_writes: bool,
}

impl ParallelConfig {
    pub fn new(
        workers: usize,
        batch: usize,
        gamma: f64,
        mode: ParallelMode,
        sample_budget: u64,
        seed: u64,
    ) -> Self {
        ParallelConfig { workers, batch, gamma, mode, sample_budget, seed, racy_writes: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::InvalidConfig("need at least one worker".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidConfig(format!("step size {} invalid", self.gamma)));
        }
        if self.sample_budget == 0 {
            return Err(Error::InvalidConfig("sample budget must be positive".into()));
        }
        if self.mode == ParallelMode::WildAdabatch && self.sample_budget < self.batch as u64 {
            return Err(Error::InvalidConfig(format!(
                "sample budget {} smaller than one batch of {}",
                self.sample_budget, self.batch
            )));
        }
        Ok(())
    }

    /// Batch-synchronous mode works best with at least one example per
    /// worker per iteration; smaller batches only waste threads.
    pub fn undersized_batch(&self) -> bool {
        self.mode == ParallelMode::WildAdabatch && self.batch < self.workers
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.mode.name(),
            "workers": self.workers,
            "batch": self.batch,
            "gamma": self.gamma,
            "sample_budget": self.sample_budget,
            "seed": self.seed,
            "racy_writes": self.racy_writes,
        })
    }
}

/// Dense weight vector with word-granularity atomic access.
pub struct SharedModel {
    cells: Vec<AtomicU64>,
}

impl SharedModel {
    pub fn new(dim: usize) -> Self {
        SharedModel { cells: (0..dim).map(|_| AtomicU64::new(0f64.to_bits())).collect() }
    }

    pub fn from_weights(w: &[f64]) -> Self {
        SharedModel { cells: w.iter().map(|v| AtomicU64::new(v.to_bits())).collect() }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn load(&self, k: usize) -> f64 {
        f64::from_bits(self.cells[k].load(Ordering::Relaxed))
    }

    pub fn store(&self, k: usize, v: f64) {
        self.cells[k].store(v.to_bits(), Ordering::Relaxed);
    }

    /// Atomic `w(k) += delta` via compare-exchange; never loses a concurrent
    /// update.
    pub fn add(&self, k: usize, delta: f64) {
        let cell = &self.cells[k];
        let mut current = cell.load(Ordering::Relaxed);
        loop {
            let next = (f64::from_bits(current) + delta).to_bits();
            match cell.compare_exchange_weak(current, next, Ordering::Relaxed, Ordering::Relaxed)
            {
                Ok(_) => return,
                Err(actual) => current = actual,
            }
        }
    }

    /// Racy `w(k) += delta`: plain load then store; concurrent writers may
    /// drop each other's contributions.
    pub fn add_racy(&self, k: usize, delta: f64) {
        self.store(k, self.load(k) + delta);
    }

    pub fn dot(&self, x: &SparseVec) -> f64 {
        x.iter().map(|(k, v)| v * self.load(k)).sum()
    }

    pub fn snapshot(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.load(k)).collect()
    }
}

/// Contiguous slice of batch positions owned by worker `t`: sizes differ by
/// at most one and the slices partition `0..batch`.
fn worker_slice(t: usize, workers: usize, batch: usize) -> (usize, usize) {
    let base = batch / workers;
    let extra = batch % workers;
    let lo = t * base + t.min(extra);
    let hi = lo + base + usize::from(t < extra);
    (lo, hi)
}

#[derive(Debug, Clone)]
pub struct ParallelOutcome {
    pub weights: Vec<f64>,
    pub metrics: RunMetrics,
    pub divergence: Option<DivergencePoint>,
}

/// Batch-synchronous parallel training.
///
/// Each iteration runs in two barrier-separated phases: every worker
/// computes per-example gradient slopes for its contiguous share of the
/// batch against the frozen shared weights, then all workers concurrently
/// apply `w(k) −= (γ/B)·scale(k)·slope·x(k)` per example. Batch composition
/// is derived from `(seed, iteration)` identically for any worker count.
/// Evaluation runs between iterations while workers are parked at the
/// barrier; its wall-clock is excluded from training time.
pub fn wild_train(
    data: &Dataset,
    kind: LossKind,
    stats: &FeatureStats,
    cfg: &ParallelConfig,
    eval: &Evaluator,
    schedule: &[u64],
) -> Result<ParallelOutcome> {
    cfg.validate()?;
    if cfg.mode != ParallelMode::WildAdabatch {
        return Err(Error::InvalidConfig("config is not batch-synchronous".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scales = recondition_scales(MergeRule::Cbp, stats, cfg.batch as u32)?;
    let model = SharedModel::new(data.dim());
    let stop = AtomicBool::new(false);
    let start_barrier = Barrier::new(cfg.workers + 1);
    let mid_barrier = Barrier::new(cfg.workers + 1);
    let end_barrier = Barrier::new(cfg.workers + 1);

    let mut metrics = RunMetrics::new(
        format!("parallel/{}", cfg.mode.name()),
        cfg.snapshot(),
    );
    let mut schedule: Vec<u64> = schedule.to_vec();
    schedule.sort_unstable();
    schedule.dedup();
    let mut next_cp = 0usize;
    while next_cp < schedule.len() && schedule[next_cp] == 0 {
        metrics.checkpoints.push(eval.checkpoint(0, 0.0, &model.snapshot())?);
        next_cp += 1;
    }

    let iterations = cfg.sample_budget / cfg.batch as u64;
    let mut divergence = None;
    let mut train_secs = 0.0;
    let mut samples_seen = 0u64;
    let mut eval_error: Option<Error> = None;

    std::thread::scope(|scope| -> Result<()> {
        for t in 0..cfg.workers {
            let model = &model;
            let stop = &stop;
            let start_barrier = &start_barrier;
            let mid_barrier = &mid_barrier;
            let end_barrier = &end_barrier;
            let scales = &scales;
            let cfg = cfg;
            scope.spawn(move || {
                let (lo, hi) = worker_slice(t, cfg.workers, cfg.batch);
                let mut slopes = vec![0.0f64; hi - lo];
                let mut iter = 0u64;
                loop {
                    start_barrier.wait();
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let batch = batch_indices(cfg.seed, iter, cfg.batch, data.len());
                    // Phase 1: slopes against frozen weights.
                    for (s, &i) in slopes.iter_mut().zip(&batch[lo..hi]) {
                        let ex = data.example(i);
                        *s = kind.derivative(model.dot(&ex.features), ex.label);
                    }
                    mid_barrier.wait();
                    // Phase 2: concurrent per-example application.
                    let step = cfg.gamma / cfg.batch as f64;
                    for (&slope, &i) in slopes.iter().zip(&batch[lo..hi]) {
                        for (k, v) in data.example(i).features.iter() {
                            let delta = -step * scales[k] * slope * v;
                            if cfg.racy_writes {
                                model.add_racy(k, delta);
                            } else {
                                model.add(k, delta);
                            }
                        }
                    }
                    end_barrier.wait();
                    iter += 1;
                }
            });
        }

        let mut clock = Instant::now();
        for it in 0..iterations {
            start_barrier.wait();
            mid_barrier.wait();
            end_barrier.wait();
            samples_seen += cfg.batch as u64;
            if next_cp < schedule.len() && samples_seen >= schedule[next_cp] {
                train_secs += clock.elapsed().as_secs_f64();
                while next_cp < schedule.len() && samples_seen >= schedule[next_cp] {
                    next_cp += 1;
                }
                match eval.checkpoint(samples_seen, train_secs, &model.snapshot()) {
                    Ok(cp) => {
                        let bad = !cp.objective.is_finite();
                        metrics.checkpoints.push(cp);
                        if bad {
                            divergence = Some(DivergencePoint {
                                iteration: it + 1,
                                samples_seen,
                            });
                            break;
                        }
                    }
                    Err(e) => {
                        eval_error = Some(e);
                        break;
                    }
                }
                clock = Instant::now();
            }
        }
        train_secs += clock.elapsed().as_secs_f64();
        stop.store(true, Ordering::Relaxed);
        start_barrier.wait();
        Ok(())
    })?;
    if let Some(e) = eval_error {
        return Err(e);
    }

    let weights = model.snapshot();
    if divergence.is_none()
        && metrics.checkpoints.last().map_or(true, |c| c.samples < samples_seen)
    {
        metrics.checkpoints.push(eval.checkpoint(samples_seen, train_secs, &weights)?);
    }
    metrics.train_seconds = train_secs;
    metrics.samples_per_sec =
        if train_secs > 0.0 { samples_seen as f64 / train_secs } else { 0.0 };
    if divergence.is_none() {
        metrics.sigma2 = Some(gradient_variance(data, kind, &weights)?);
    }
    Ok(ParallelOutcome { weights, metrics, divergence })
}

/// Fully asynchronous training: every worker loops — draw an example from
/// its own RNG stream, read the needed coordinates, apply single-sample
/// updates per coordinate — with no synchronization beyond a shared sample
/// counter. Stops once the counter reaches the budget; the final count
/// overshoots by at most workers − 1.
///
/// The controller thread snapshots the model at scheduled sample counts
/// while workers keep running, so checkpoint wall-clock here includes any
/// slowdown evaluation causes.
pub fn hogwild_train(
    data: &Dataset,
    kind: LossKind,
    cfg: &ParallelConfig,
    eval: &Evaluator,
    schedule: &[u64],
) -> Result<ParallelOutcome> {
    cfg.validate()?;
    if cfg.mode != ParallelMode::Hogwild {
        return Err(Error::InvalidConfig("config is not asynchronous".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model = SharedModel::new(data.dim());
    let counter = AtomicU64::new(0);
    let broken = AtomicBool::new(false);

    let mut metrics = RunMetrics::new(
        format!("parallel/{}", cfg.mode.name()),
        cfg.snapshot(),
    );
    let mut schedule: Vec<u64> = schedule.to_vec();
    schedule.sort_unstable();
    schedule.dedup();
    let mut next_cp = 0usize;
    while next_cp < schedule.len() && schedule[next_cp] == 0 {
        metrics.checkpoints.push(eval.checkpoint(0, 0.0, &model.snapshot())?);
        next_cp += 1;
    }

    let start = Instant::now();
    let mut eval_error: Option<Error> = None;
    std::thread::scope(|scope| {
        for t in 0..cfg.workers {
            let model = &model;
            let counter = &counter;
            let broken = &broken;
            let cfg = cfg;
            scope.spawn(move || {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(t as u64 + 1);
                loop {
                    if broken.load(Ordering::Relaxed)
                        || counter.load(Ordering::Relaxed) >= cfg.sample_budget
                    {
                        break;
                    }
                    counter.fetch_add(1, Ordering::Relaxed);
                    let ex = data.example(rng.random_range(0..data.len()));
                    let slope = kind.derivative(model.dot(&ex.features), ex.label);
                    if !slope.is_finite() {
                        broken.store(true, Ordering::Relaxed);
                        break;
                    }
                    for (k, v) in ex.features.iter() {
                        let delta = -cfg.gamma * slope * v;
                        if cfg.racy_writes {
                            model.add_racy(k, delta);
                        } else {
                            model.add(k, delta);
                        }
                    }
                }
            });
        }

        // Scheduled snapshots while training runs.
        loop {
            let seen = counter.load(Ordering::Relaxed);
            if broken.load(Ordering::Relaxed) || seen >= cfg.sample_budget {
                break;
            }
            if next_cp < schedule.len() && seen >= schedule[next_cp] {
                while next_cp < schedule.len() && seen >= schedule[next_cp] {
                    next_cp += 1;
                }
                match eval.checkpoint(seen, start.elapsed().as_secs_f64(), &model.snapshot()) {
                    Ok(cp) => {
                        let bad = !cp.objective.is_finite();
                        metrics.checkpoints.push(cp);
                        if bad {
                            broken.store(true, Ordering::Relaxed);
                            break;
                        }
                    }
                    Err(e) => {
                        eval_error = Some(e);
                        broken.store(true, Ordering::Relaxed);
                        break;
                    }
                }
            }
            std::thread::sleep(std::time::Duration::from_micros(200));
        }
    });
    if let Some(e) = eval_error {
        return Err(e);
    }

    let train_secs = start.elapsed().as_secs_f64();
    let samples_seen = counter.load(Ordering::Relaxed);
    let weights = model.snapshot();
    let diverged = broken.load(Ordering::Relaxed) || weights.iter().any(|v| !v.is_finite());
    let divergence = diverged.then_some(DivergencePoint {
        iteration: samples_seen,
        samples_seen,
    });
    if divergence.is_none()
        && metrics.checkpoints.last().map_or(true, |c| c.samples < samples_seen)
    {
        metrics.checkpoints.push(eval.checkpoint(samples_seen, train_secs, &weights)?);
    }
    metrics.train_seconds = train_secs;
    metrics.samples_per_sec =
        if train_secs > 0.0 { samples_seen as f64 / train_secs } else { 0.0 };
    if divergence.is_none() {
        metrics.sigma2 = Some(gradient_variance(data, kind, &weights)?);
    }
    Ok(ParallelOutcome { weights, metrics, divergence })
}

#[derive(Debug, Clone)]
pub struct ThroughputRow {
    pub method: String,
    pub workers: u64,
    pub samples_per_sec: f64,
    /// Training seconds until the target error was first met; `None` when
    /// never reached.
    pub seconds_to_target: Option<f64>,
}

/// One row per run: worker count (1 when the config carries none),
/// throughput, and wall-clock to the caller's target error. A checkpoint
/// meets the target on held-out error when available, training objective
/// otherwise.
pub fn throughput_report(runs: &[RunMetrics], target_error: f64) -> Vec<ThroughputRow> {
    runs.iter()
        .map(|run| {
            let workers = run
                .config
                .get("workers")
                .and_then(|v| v.as_u64())
                .unwrap_or(1);
            let seconds_to_target = run
                .checkpoints
                .iter()
                .find(|c| c.test_error.unwrap_or(c.objective) <= target_error)
                .map(|c| c.seconds);
            ThroughputRow {
                method: run.method.clone(),
                workers,
                samples_per_sec: run.samples_per_sec,
                seconds_to_target,
            }
        })
        .collect()
}

/// Plain-text table of a throughput report.
pub fn render_throughput_table(rows: &[ThroughputRow]) -> String {
    let mut out = String::from("method\tworkers\tsamples_per_sec\tseconds_to_target\n");
    for r in rows {
        let reach = r
            .seconds_to_target
            .map(|s| format!("{s:.6}"))
            .unwrap_or_else(|| "unreached".into());
        out.push_str(&format!(
            "{}\t{}\t{:.1}\t{}\n",
            r.method, r.workers, r.samples_per_sec, reach
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::Regularizer;
    use crate::metrics::Checkpoint;
    use crate::sgd::{SgdConfig, SgdDriver, UpdateRule};
    use crate::sparse::estimate_feature_probabilities;
    use crate::synth::{gen_synthetic, ProbLaw, SynthConfig};

    fn synth(task: LossKind, dim: usize, n: usize, seed: u64) -> (Dataset, FeatureStats) {
        let cfg = SynthConfig {
            dim,
            n,
            law: ProbLaw::UniformRange { lo: 0.1, hi: 0.5 },
            task,
            noise: 0.1,
            weight_scale: 1.0,
            seed,
        };
        let out = gen_synthetic(&cfg).unwrap();
        let stats = estimate_feature_probabilities(&out.data).unwrap();
        (out.data, stats)
    }

    fn evaluator<'a>(data: &'a Dataset, kind: LossKind) -> Evaluator<'a> {
        Evaluator {
            train: data,
            kind,
            reg: Regularizer::none(),
            stats: None,
            test: None,
            fstar: None,
        }
    }

    #[test]
    fn worker_slices_partition_the_batch() {
        for &(workers, batch) in &[(1usize, 7usize), (3, 7), (4, 4), (5, 3), (7, 50)] {
            let mut covered = vec![0u32; batch];
            let mut sizes = Vec::new();
            for t in 0..workers {
                let (lo, hi) = worker_slice(t, workers, batch);
                assert!(lo <= hi && hi <= batch);
                sizes.push(hi - lo);
                for c in covered[lo..hi].iter_mut() {
                    *c += 1;
                }
            }
            assert!(covered.iter().all(|&c| c == 1), "W={workers} B={batch}");
            let min = sizes.iter().min().unwrap();
            let max = sizes.iter().max().unwrap();
            assert!(max - min <= 1);
        }
    }

    #[test]
    fn zero_step_size_keeps_weights_constant_for_any_worker_count() {
        let (data, stats) = synth(LossKind::Squared, 12, 60, 3);
        let eval = evaluator(&data, LossKind::Squared);
        for workers in [1usize, 3] {
            let cfg = ParallelConfig::new(workers, 8, 0.0, ParallelMode::WildAdabatch, 80, 5);
            let out = wild_train(&data, LossKind::Squared, &stats, &cfg, &eval, &[0, 80]).unwrap();
            assert!(out.weights.iter().all(|&v| v == 0.0));
        }
        let cfg = ParallelConfig::new(2, 1, 0.0, ParallelMode::Hogwild, 50, 5);
        let out = hogwild_train(&data, LossKind::Squared, &cfg, &eval, &[0]).unwrap();
        assert!(out.weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_worker_matches_sequential_reconditioned_sgd() {
        let (data, stats) = synth(LossKind::Squared, 20, 150, 11);
        let gamma = 0.05;
        let batch = 10;
        let budget = 600u64;
        let seed = 21;

        let cfg = ParallelConfig::new(1, batch, gamma, ParallelMode::WildAdabatch, budget, seed);
        let eval = evaluator(&data, LossKind::Squared);
        let wild = wild_train(&data, LossKind::Squared, &stats, &cfg, &eval, &[budget]).unwrap();

        let scfg = SgdConfig::new(gamma, batch, UpdateRule::Merge(MergeRule::Cbp), budget, seed);
        let mut driver = SgdDriver::new(&data, LossKind::Squared, &stats, scfg).unwrap();
        for _ in 0..budget / batch as u64 {
            let b = driver.next_batch();
            driver.step(&b).unwrap();
        }
        for (k, (a, b)) in wild.weights.iter().zip(driver.weights()).enumerate() {
            assert!(
                (a - b).abs() <= 1e-9 * (1.0 + b.abs()),
                "coordinate {k}: parallel {a} vs sequential {b}"
            );
        }
    }

    #[test]
    fn final_weights_are_independent_of_worker_count_up_to_rounding() {
        let (data, stats) = synth(LossKind::Logistic, 25, 200, 31);
        let eval = evaluator(&data, LossKind::Logistic);
        let run = |workers: usize| {
            let cfg =
                ParallelConfig::new(workers, 24, 0.3, ParallelMode::WildAdabatch, 1200, 77);
            wild_train(&data, LossKind::Logistic, &stats, &cfg, &eval, &[1200])
                .unwrap()
                .weights
        };
        let w1 = run(1);
        for workers in [2usize, 4] {
            let w = run(workers);
            for (k, (a, b)) in w.iter().zip(&w1).enumerate() {
                assert!(
                    (a - b).abs() <= 1e-6 * (1.0 + b.abs()),
                    "W={workers}, coordinate {k}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn hogwild_counter_stays_within_the_stopping_race_bound() {
        let (data, _) = synth(LossKind::Squared, 10, 50, 7);
        let eval = evaluator(&data, LossKind::Squared);
        let budget = 1000u64;
        for workers in [1usize, 4] {
            let cfg = ParallelConfig::new(workers, 1, 0.01, ParallelMode::Hogwild, budget, 3);
            let out = hogwild_train(&data, LossKind::Squared, &cfg, &eval, &[budget]).unwrap();
            let seen = out.metrics.checkpoints.last().unwrap().samples;
            assert!(
                seen >= budget && seen <= budget + workers as u64 - 1,
                "W={workers}: counter {seen} outside [{budget}, {}]",
                budget + workers as u64 - 1
            );
        }
    }

    #[test]
    fn hogwild_single_worker_is_deterministic_and_makes_progress() {
        let (data, _) = synth(LossKind::Squared, 15, 120, 19);
        let eval = evaluator(&data, LossKind::Squared);
        let cfg = ParallelConfig::new(1, 1, 0.05, ParallelMode::Hogwild, 2000, 9);
        let a = hogwild_train(&data, LossKind::Squared, &cfg, &eval, &[0, 2000]).unwrap();
        let b = hogwild_train(&data, LossKind::Squared, &cfg, &eval, &[0, 2000]).unwrap();
        let bits = |w: &[f64]| w.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.weights), bits(&b.weights));
        let first = a.metrics.checkpoints.first().unwrap().objective;
        let last = a.metrics.checkpoints.last().unwrap().objective;
        assert!(last < first, "objective did not improve: {first} -> {last}");
    }

    #[test]
    fn multi_worker_hogwild_reaches_a_sequential_quality_ballpark() {
        let (data, _) = synth(LossKind::Squared, 15, 120, 23);
        let eval = evaluator(&data, LossKind::Squared);
        let run = |workers: usize| {
            let cfg = ParallelConfig::new(workers, 1, 0.05, ParallelMode::Hogwild, 3000, 13);
            hogwild_train(&data, LossKind::Squared, &cfg, &eval, &[3000])
                .unwrap()
                .metrics
                .checkpoints
                .last()
                .unwrap()
                .objective
        };
        let sequential = run(1);
        let parallel = run(4);
        assert!(
            parallel <= sequential * 1.5 + 0.05,
            "W=4 objective {parallel} far from W=1 {sequential}"
        );
    }

    #[test]
    fn shared_model_never_exposes_torn_values() {
        // Two writers flip coordinates between two full-width sentinel
        // patterns; readers must only ever observe a sentinel or the initial
        // zero. A torn 32-bit half-write would produce a different value.
        let model = SharedModel::new(4);
        let a = f64::from_bits(0x4142_4344_4546_4748);
        let b = f64::from_bits(0xBBBB_AAAA_CCCC_DDDD);
        let stop = AtomicBool::new(false);
        std::thread::scope(|scope| {
            for _ in 0..2 {
                let model = &model;
                let stop = &stop;
                scope.spawn(move || {
                    let mut flip = false;
                    while !stop.load(Ordering::Relaxed) {
                        for k in 0..4 {
                            model.store(k, if flip { a } else { b });
                        }
                        flip = !flip;
                    }
                });
            }
            let model = &model;
            let mut seen = 0u64;
            while seen < 200_000 {
                for k in 0..4 {
                    let v = model.load(k);
                    let bits = v.to_bits();
                    assert!(
                        bits == a.to_bits() || bits == b.to_bits() || bits == 0f64.to_bits(),
                        "torn value {bits:#x}"
                    );
                    seen += 1;
                }
            }
            stop.store(true, Ordering::Relaxed);
        });
    }

    #[test]
    fn compare_exchange_add_loses_no_updates() {
        let model = SharedModel::new(1);
        std::thread::scope(|scope| {
            for _ in 0..4 {
                let model = &model;
                scope.spawn(move || {
                    for _ in 0..10_000 {
                        model.add(0, 1.0);
                    }
                });
            }
        });
        // 40 000 increments of exactly 1.0 are exact in f64.
        assert_eq!(model.load(0), 40_000.0);
    }

    #[test]
    fn racy_mode_still_trains() {
        let (data, stats) = synth(LossKind::Squared, 12, 80, 29);
        let eval = evaluator(&data, LossKind::Squared);
        let mut cfg = ParallelConfig::new(2, 8, 0.05, ParallelMode::WildAdabatch, 800, 17);
        cfg.racy_writes = true;
        let out = wild_train(&data, LossKind::Squared, &stats, &cfg, &eval, &[0, 800]).unwrap();
        assert!(out.divergence.is_none());
        let first = out.metrics.checkpoints.first().unwrap().objective;
        let last = out.metrics.checkpoints.last().unwrap().objective;
        assert!(last < first);
    }

    #[test]
    fn runaway_step_size_is_flagged_at_a_checkpoint() {
        let (data, stats) = synth(LossKind::Squared, 10, 60, 37);
        let eval = evaluator(&data, LossKind::Squared);
        let cfg = ParallelConfig::new(2, 4, 50.0, ParallelMode::WildAdabatch, 4000, 3);
        let schedule = crate::metrics::geometric_schedule(4, 4000);
        let out = wild_train(&data, LossKind::Squared, &stats, &cfg, &eval, &schedule).unwrap();
        let last = out.metrics.checkpoints.last().unwrap();
        assert!(
            out.divergence.is_some() || last.objective > 1e6,
            "expected blow-up, got objective {}",
            last.objective
        );
    }

    #[test]
    fn throughput_rows_mark_unreached_targets() {
        let mut reached = RunMetrics::new("parallel/wild-adabatch", serde_json::json!({"workers": 4}));
        reached.samples_per_sec = 1000.0;
        reached.checkpoints = vec![
            Checkpoint { samples: 10, seconds: 0.1, objective: 0.9, test_error: Some(0.4), test_loss: None, gap: None },
            Checkpoint { samples: 20, seconds: 0.2, objective: 0.5, test_error: Some(0.1), test_loss: None, gap: None },
        ];
        let mut unreached = RunMetrics::new("sgd/cbp", serde_json::Value::Null);
        unreached.samples_per_sec = 500.0;
        unreached.checkpoints = vec![Checkpoint {
            samples: 10,
            seconds: 0.3,
            objective: 0.9,
            test_error: Some(0.5),
            test_loss: None,
            gap: None,
        }];
        let rows = throughput_report(&[reached, unreached], 0.2);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].workers, 4);
        assert_eq!(rows[0].seconds_to_target, Some(0.2));
        assert_eq!(rows[1].workers, 1);
        assert_eq!(rows[1].seconds_to_target, None);
        let table = render_throughput_table(&rows);
        assert!(table.contains("unreached"));
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn config_validation_rejects_degenerate_setups() {
        let ok = ParallelConfig::new(2, 4, 0.1, ParallelMode::WildAdabatch, 100, 0);
        assert!(ok.validate().is_ok());
        assert!(!ok.undersized_batch());
        let mut c = ok.clone();
        c.workers = 0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.gamma = -1.0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.sample_budget = 2;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.workers = 8;
        assert!(c.undersized_batch());
    }
}
