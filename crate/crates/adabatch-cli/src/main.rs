//! Benchmark harness: train single configurations, grid-search step sizes,
//! compare merge rules across batch sizes, generate synthetic datasets, and
//! verify the closed-form moment identities against their oracles.
//!
//! Exit codes: 0 success, 1 usage, 2 divergence, 3 verification failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use adabatch::aggregation::MergeRule;
use adabatch::loss::{
    curvature_constants, CurvatureConstants, L2Metric, LossKind, Regularizer,
};
use adabatch::metrics::{geometric_schedule, Evaluator, RunMetrics};
use adabatch::moments::{
    averaged_nonzero_mean, averaged_nonzero_second_moment, averaged_nonzero_second_moment_bound,
    averaged_nonzero_second_moment_bound_np5, brute_force_moments, expected_inverse_active_count,
    monte_carlo_merge_expectation, DiscreteLaw,
};
use adabatch::parallel::{
    hogwild_train, throughput_report, wild_train, ParallelConfig, ParallelMode,
};
use adabatch::sgd::{max_stable_step, train, AdagradConfig, DivergencePoint, SgdConfig, UpdateRule};
use adabatch::sparse::{estimate_feature_probabilities, Dataset, FeatureStats};
use adabatch::svrg::{
    schedule_adabatch, schedule_minibatch, svrg_train, SvrgConfig, SvrgRule,
};
use adabatch::synth::{gen_synthetic, ProbLaw, SynthConfig};

const EXIT_USAGE: i32 = 1;
const EXIT_DIVERGENCE: i32 = 2;
const EXIT_VERIFICATION: i32 = 3;

/// Environment variable naming a directory to resolve relative `--data`
/// paths against when they don't exist as given.
const DATA_DIR_VAR: &str = "ADABATCH_DATA_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "adabatch",
    version,
    about = "Sparse stochastic-optimization benchmark harness",
    long_about = "Train sparse linear models with support-aware gradient merging, \
                  compare aggregation rules, and verify the probabilistic identities \
                  behind the activity reconditioning.\n\nExit codes: 0 success, \
                  1 usage error, 2 divergence, 3 verification failure."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic sparse dataset in libsvm format.
    Gen(GenArgs),
    /// Train one configuration; emits checkpoint metrics as CSV (and JSON).
    Train(TrainArgs),
    /// Power-of-two step-size grid; emits a per-γ table and the best pick.
    Grid(GridArgs),
    /// Run several (rule, batch) configurations; emits per-method tables
    /// named `<rule>_b<batch>.csv` plus `summary.csv` in --out-dir.
    Compare(CompareArgs),
    /// Check the moment formulas, bounds, and merge expectation against
    /// enumeration and Monte Carlo oracles.
    VerifyLemmas(VerifyArgs),
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq, Debug)]
enum LossArg {
    Logistic,
    Squared,
}

impl LossArg {
    fn kind(self) -> LossKind {
        match self {
            LossArg::Logistic => LossKind::Logistic,
            LossArg::Squared => LossKind::Squared,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq, Debug)]
enum RuleArg {
    /// Mini-batch average (divide by B).
    Mb,
    /// Support-aware average (divide by the number of active members).
    Ab,
    /// Mini-batch average rescaled by (1−(1−p)^B)/p.
    Cbp,
    /// Mini-batch average rescaled by 1/p.
    Invp,
    /// Per-coordinate adaptive step sizes.
    Adagrad,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq, Debug)]
enum EngineArg {
    /// Sequential stochastic gradient descent.
    Sgd,
    /// Variance reduction with full-gradient anchors.
    Svrg,
    /// Batch-synchronous parallel training with activity rescaling.
    Wild,
    /// Fully asynchronous lock-free parallel training.
    Hogwild,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq, Debug)]
enum MetricArg {
    /// Plain ‖w‖² penalty.
    Id,
    /// Activity-weighted Σ p(k)·w(k)² penalty.
    P,
}

impl MetricArg {
    fn metric(self) -> L2Metric {
        match self {
            MetricArg::Id => L2Metric::Identity,
            MetricArg::P => L2Metric::DiagP,
        }
    }
}

#[derive(Args, Clone, Debug)]
struct DataArgs {
    /// Path to a libsvm dataset; relative paths also try $ADABATCH_DATA_DIR.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Inline synthetic dataset spec as JSON, e.g.
    /// '{"dim":30,"n":1000,"law":{"uniform_range":{"lo":0.05,"hi":0.4}},
    /// "task":"logistic","noise":0.1,"weight_scale":1.0,"seed":1}'.
    #[arg(long, conflicts_with = "data")]
    synth: Option<String>,
    /// L2-normalize feature rows before training.
    #[arg(long)]
    normalize: bool,
    /// Held-out fraction for test metrics (deterministic shuffled split).
    #[arg(long = "test-split", default_value_t = 0.0)]
    test_split: f64,
}

#[derive(Args, Clone, Debug)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = LossArg::Logistic)]
    loss: LossArg,
    /// Aggregation rule (default: ab for sgd/svrg; wild is always cbp).
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,
    #[arg(long, value_enum, default_value_t = EngineArg::Sgd)]
    engine: EngineArg,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Worker threads (parallel engines only).
    #[arg(long)]
    workers: Option<usize>,
    /// Total samples to process (sgd/wild/hogwild).
    #[arg(long, default_value_t = 100_000)]
    budget: u64,
    /// Variance-reduction epochs, optionally with an explicit inner length:
    /// "S" or "S,m" (default: 10 epochs, m from the closed-form schedule).
    #[arg(long = "epochs-m")]
    epochs_m: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ridge strength (sequential engines only).
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    #[arg(long = "l2-metric", value_enum, default_value_t = MetricArg::Id)]
    l2_metric: MetricArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Step size (Adagrad: its scale α). Default: half the stability bound.
    #[arg(long)]
    gamma: Option<f64>,
    /// CSV output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the full metrics, config snapshot included, as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Smallest step size in the grid.
    #[arg(long = "gamma-lo")]
    gamma_lo: f64,
    /// Largest step size; the grid doubles from --gamma-lo up to here.
    #[arg(long = "gamma-hi")]
    gamma_hi: f64,
    /// Per-γ table output path (default: stdout, before the best-pick line).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = LossArg::Logistic)]
    loss: LossArg,
    /// Rules to compare.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [RuleArg::Mb, RuleArg::Ab])]
    rules: Vec<RuleArg>,
    /// Batch sizes to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10, 50])]
    batches: Vec<usize>,
    /// Fixed step size for every run (default: half each rule's stability bound).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    budget: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    #[arg(long = "l2-metric", value_enum, default_value_t = MetricArg::Id)]
    l2_metric: MetricArg,
    /// Target test error; adds a seconds-to-target column to the summary.
    #[arg(long)]
    target: Option<f64>,
    /// Directory receiving the per-method tables and summary.csv.
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Monte Carlo batches for the merged-gradient expectation check.
    #[arg(long, default_value_t = 200_000)]
    trials: u64,
    /// Lower bound on N·p for the improved-bound sweep.
    #[arg(long = "np-min", default_value_t = 5.0)]
    np_min: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Full synthetic spec as JSON (same schema as --synth); overrides the
    /// individual knobs below.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long, default_value_t = 30)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, value_enum, default_value_t = LossArg::Logistic)]
    loss: LossArg,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long = "weight-scale", default_value_t = 1.0)]
    weight_scale: f64,
    /// Lower end of the uniform activity-probability range.
    #[arg(long = "p-lo", default_value_t = 0.08)]
    p_lo: f64,
    /// Upper end of the uniform activity-probability range.
    #[arg(long = "p-hi", default_value_t = 0.5)]
    p_hi: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// CLI failure modes mapped onto the documented exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Divergence(String),
    Verification(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) | Failure::Runtime(_) => EXIT_USAGE,
            Failure::Divergence(_) => EXIT_DIVERGENCE,
            Failure::Verification(_) => EXIT_VERIFICATION,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m)
            | Failure::Divergence(m)
            | Failure::Verification(m)
            | Failure::Runtime(m) => m,
        }
    }
}

impl From<adabatch::Error> for Failure {
    fn from(e: adabatch::Error) -> Self {
        match e {
            adabatch::Error::Divergence { .. } => Failure::Divergence(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Remap clap's default exit status 2 (reserved here for
            // divergence) onto the usage code; --help/--version stay 0.
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(&args),
        Cmd::Train(args) => cmd_train(&args),
        Cmd::Grid(args) => cmd_grid(&args),
        Cmd::Compare(args) => cmd_compare(&args),
        Cmd::VerifyLemmas(args) => cmd_verify_lemmas(&args),
    };
    if let Err(f) = result {
        eprintln!("error: {}", f.message());
        std::process::exit(f.code());
    }
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

fn resolve_data_path(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    if let Ok(dir) = std::env::var(DATA_DIR_VAR) {
        let candidate = Path::new(&dir).join(path);
        if candidate.exists() {
            return candidate;
        }
    }
    path.to_path_buf()
}

/// Loads (training set, optional held-out set) from --data or --synth.
fn load_dataset(args: &DataArgs, seed: u64) -> Result<(Dataset, Option<Dataset>), Failure> {
    let mut data = if let Some(spec) = &args.synth {
        let cfg: SynthConfig =
            serde_json::from_str(spec).map_err(|e| usage(format!("bad --synth spec: {e}")))?;
        gen_synthetic(&cfg)?.data
    } else if let Some(path) = &args.data {
        let resolved = resolve_data_path(path);
        Dataset::parse_libsvm_path(&resolved)
            .map_err(|e| usage(format!("cannot load {}: {e}", resolved.display())))?
    } else {
        return Err(usage("one of --data or --synth is required"));
    };
    if args.normalize {
        data.normalize_rows();
    }
    if !(0.0..1.0).contains(&args.test_split) {
        return Err(usage(format!(
            "--test-split {} outside [0, 1)",
            args.test_split
        )));
    }
    if args.test_split > 0.0 {
        let (rest, held) = data.split(args.test_split, seed.wrapping_add(0xA5EED))?;
        if rest.is_empty() {
            return Err(usage("--test-split leaves no training examples"));
        }
        Ok((rest, Some(held)))
    } else {
        Ok((data, None))
    }
}

// ---------------------------------------------------------------------------
// Shared run plumbing
// ---------------------------------------------------------------------------

struct Prepared {
    train: Dataset,
    test: Option<Dataset>,
    stats: FeatureStats,
    kind: LossKind,
    reg: Regularizer,
    consts: CurvatureConstants,
}

fn prepare(run: &RunArgs) -> Result<Prepared, Failure> {
    validate_flags(run)?;
    let (train_set, test) = load_dataset(&run.data, run.seed)?;
    let stats = estimate_feature_probabilities(&train_set)?;
    let kind = run.loss.kind();
    let reg = Regularizer::new(run.l2, run.l2_metric.metric());
    let consts = curvature_constants(kind, &train_set, &stats).with_l2(&reg, &stats);
    Ok(Prepared { train: train_set, test, stats, kind, reg, consts })
}

fn validate_flags(run: &RunArgs) -> Result<(), Failure> {
    let parallel = matches!(run.engine, EngineArg::Wild | EngineArg::Hogwild);
    if run.workers.is_some() && !parallel {
        return Err(usage(format!(
            "--workers conflicts with --engine {:?}: only the parallel engines take workers",
            run.engine
        )));
    }
    if run.epochs_m.is_some() && run.engine != EngineArg::Svrg {
        return Err(usage("--epochs-m applies only to --engine svrg"));
    }
    if run.l2 != 0.0 && parallel {
        return Err(usage(
            "--l2 conflicts with the parallel engines: a ridge term would densify \
             the shared-model writes",
        ));
    }
    if run.l2 < 0.0 {
        return Err(usage(format!("--l2 {} must be nonnegative", run.l2)));
    }
    if run.engine == EngineArg::Hogwild && run.batch != 1 {
        return Err(usage(
            "--engine hogwild processes one example per update; use --batch 1",
        ));
    }
    match (run.engine, run.rule) {
        (EngineArg::Wild, Some(r)) if r != RuleArg::Cbp => {
            return Err(usage(
                "--engine wild always applies the activity-rescaled rule; \
                 drop --rule or pass --rule cbp",
            ));
        }
        (EngineArg::Hogwild, Some(_)) => {
            return Err(usage(
                "--engine hogwild applies plain single-example updates; drop --rule",
            ));
        }
        (EngineArg::Svrg, Some(r)) if !matches!(r, RuleArg::Mb | RuleArg::Ab) => {
            return Err(usage("--engine svrg supports --rule mb or --rule ab only"));
        }
        _ => {}
    }
    Ok(())
}

fn merge_rule(rule: RuleArg) -> Option<MergeRule> {
    match rule {
        RuleArg::Mb => Some(MergeRule::Minibatch),
        RuleArg::Ab => Some(MergeRule::Adabatch),
        RuleArg::Cbp => Some(MergeRule::Cbp),
        RuleArg::Invp => Some(MergeRule::InvP),
        RuleArg::Adagrad => None,
    }
}

/// "S" or "S,m" → (epochs, explicit inner length).
fn parse_epochs_m(arg: Option<&str>) -> Result<(u64, Option<u64>), Failure> {
    let Some(text) = arg else { return Ok((10, None)) };
    let parts: Vec<&str> = text.split(',').collect();
    let bad = || usage(format!("--epochs-m '{text}' is not \"S\" or \"S,m\""));
    match parts.as_slice() {
        [s] => Ok((s.trim().parse().map_err(|_| bad())?, None)),
        [s, m] => Ok((
            s.trim().parse().map_err(|_| bad())?,
            Some(m.trim().parse().map_err(|_| bad())?),
        )),
        _ => Err(bad()),
    }
}

fn default_checkpoints(batch: usize, budget: u64) -> Vec<u64> {
    let start = (budget / 256).max(batch as u64).max(1);
    geometric_schedule(start, budget)
}

/// Runs one configuration and returns its metrics plus any divergence point.
fn execute(
    prep: &Prepared,
    run: &RunArgs,
    gamma: Option<f64>,
) -> Result<(RunMetrics, Option<DivergencePoint>), Failure> {
    let eval = Evaluator {
        train: &prep.train,
        kind: prep.kind,
        reg: prep.reg,
        stats: Some(&prep.stats),
        test: prep.test.as_ref(),
        fstar: None,
    };
    let schedule = default_checkpoints(run.batch, run.budget);
    match run.engine {
        EngineArg::Sgd => {
            let rule_arg = run.rule.unwrap_or(RuleArg::Ab);
            let (rule, g) = match merge_rule(rule_arg) {
                Some(m) => {
                    let g = match gamma {
                        Some(g) => g,
                        None => 0.5 * max_stable_step(m, &prep.consts, &prep.stats, run.batch)?,
                    };
                    (UpdateRule::Merge(m), g)
                }
                None => {
                    let alpha = gamma.unwrap_or(0.1);
                    (UpdateRule::Adagrad(AdagradConfig::new(alpha)), 0.0)
                }
            };
            let mut cfg = SgdConfig::new(g, run.batch, rule, run.budget, run.seed);
            cfg.reg = prep.reg;
            let out = train(&prep.train, prep.kind, &prep.stats, &cfg, &eval, &schedule)?;
            Ok((out.metrics, out.divergence))
        }
        EngineArg::Svrg => {
            let rule = match run.rule.unwrap_or(RuleArg::Ab) {
                RuleArg::Mb => SvrgRule::Minibatch,
                _ => SvrgRule::Adabatch,
            };
            let (epochs, explicit_m) = parse_epochs_m(run.epochs_m.as_deref())?;
            let (g, m) = match (gamma, explicit_m) {
                (Some(g), Some(m)) => (g, m),
                (g_opt, m_opt) => {
                    let sched = match rule {
                        SvrgRule::Minibatch => {
                            schedule_minibatch(&prep.consts, &prep.stats, run.batch)
                        }
                        SvrgRule::Adabatch => {
                            schedule_adabatch(&prep.consts, &prep.stats, run.batch)
                        }
                    }
                    .map_err(|e| {
                        usage(format!(
                            "no closed-form schedule for this configuration ({e}); \
                             pass --gamma and --epochs-m \"S,m\" explicitly, or add \
                             strong convexity via --l2"
                        ))
                    })?;
                    (g_opt.unwrap_or(sched.gamma), m_opt.unwrap_or(sched.m))
                }
            };
            let mut cfg = SvrgConfig::new(g, m, run.batch, rule, epochs, run.seed);
            cfg.reg = prep.reg;
            let out = svrg_train(&prep.train, prep.kind, &prep.stats, &cfg, &eval)?;
            Ok((out.metrics, out.divergence))
        }
        EngineArg::Wild => {
            let g = match gamma {
                Some(g) => g,
                None => {
                    0.5 * max_stable_step(MergeRule::Cbp, &prep.consts, &prep.stats, run.batch)?
                }
            };
            let cfg = ParallelConfig::new(
                run.workers.unwrap_or(2),
                run.batch,
                g,
                ParallelMode::WildAdabatch,
                run.budget,
                run.seed,
            );
            let out = wild_train(&prep.train, prep.kind, &prep.stats, &cfg, &eval, &schedule)?;
            Ok((out.metrics, out.divergence))
        }
        EngineArg::Hogwild => {
            let g = match gamma {
                Some(g) => g,
                None => 0.5 * max_stable_step(MergeRule::Adabatch, &prep.consts, &prep.stats, 1)?,
            };
            let cfg = ParallelConfig::new(
                run.workers.unwrap_or(2),
                1,
                g,
                ParallelMode::Hogwild,
                run.budget,
                run.seed,
            );
            let out = hogwild_train(&prep.train, prep.kind, &cfg, &eval, &schedule)?;
            Ok((out.metrics, out.divergence))
        }
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text)
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen(args: &GenArgs) -> Result<(), Failure> {
    let cfg = match &args.spec {
        Some(spec) => serde_json::from_str::<SynthConfig>(spec)
            .map_err(|e| usage(format!("bad --spec: {e}")))?,
        None => SynthConfig {
            dim: args.dim,
            n: args.n,
            law: ProbLaw::UniformRange { lo: args.p_lo, hi: args.p_hi },
            task: args.loss.kind(),
            noise: args.noise,
            weight_scale: args.weight_scale,
            seed: args.seed,
        },
    };
    let synth = gen_synthetic(&cfg)?;
    synth.data.write_libsvm_path(&args.out)?;
    eprintln!(
        "wrote {} examples × {} dims to {}",
        synth.data.len(),
        synth.data.dim(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let prep = prepare(&args.run)?;
    let (metrics, divergence) = execute(&prep, &args.run, args.gamma)?;
    write_text(args.out.as_deref(), &metrics.to_csv())?;
    if let Some(path) = &args.json {
        write_text(Some(path), &metrics.to_json()?)?;
    }
    if let Some(dp) = divergence {
        return Err(Failure::Divergence(format!(
            "run diverged at iteration {} ({} samples); partial metrics were written",
            dp.iteration, dp.samples_seen
        )));
    }
    Ok(())
}

fn cmd_grid(args: &GridArgs) -> Result<(), Failure> {
    if !(args.gamma_lo > 0.0) || args.gamma_hi < args.gamma_lo {
        return Err(usage(format!(
            "grid bounds [{}, {}] invalid: need 0 < lo ≤ hi",
            args.gamma_lo, args.gamma_hi
        )));
    }
    let prep = prepare(&args.run)?;
    let mut table = String::from("gamma,status,objective,validation\n");
    let mut best: Option<(f64, f64)> = None;
    let mut gamma = args.gamma_lo;
    let mut ran = 0u32;
    while gamma <= args.gamma_hi * (1.0 + 1e-12) {
        ran += 1;
        let (metrics, divergence) = execute(&prep, &args.run, Some(gamma))?;
        let last = metrics.final_checkpoint();
        let objective = last.map_or(f64::NAN, |c| c.objective);
        // Selection metric: held-out loss when a split exists, else the
        // training objective.
        let validation = last
            .and_then(|c| c.test_loss)
            .unwrap_or(objective);
        let diverged = divergence.is_some() || !objective.is_finite();
        let status = if diverged { "diverged" } else { "ok" };
        let _ = writeln!(table, "{gamma},{status},{objective},{validation}");
        if !diverged && validation.is_finite() {
            if best.map_or(true, |(_, v)| validation < v) {
                best = Some((gamma, validation));
            }
        }
        gamma *= 2.0;
    }
    write_text(args.out.as_deref(), &table)?;
    match best {
        Some((g, v)) => {
            println!("best gamma {g} (validation {v})");
            Ok(())
        }
        None => Err(Failure::Divergence(format!(
            "all {ran} grid runs diverged; no step size can be selected"
        ))),
    }
}

fn cmd_compare(args: &CompareArgs) -> Result<(), Failure> {
    if args.rules.is_empty() || args.batches.is_empty() {
        return Err(usage("--rules and --batches must be non-empty"));
    }
    if args.rules.contains(&RuleArg::Adagrad) && args.gamma.is_none() {
        // Adagrad's default α is fine, but a fixed --gamma shared with merge
        // rules would be misleading; allow it only explicitly per run.
        return Err(usage(
            "compare with --rules adagrad needs an explicit --gamma (its α)",
        ));
    }
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", args.out_dir.display())))?;
    let run_template = RunArgs {
        data: args.data.clone(),
        loss: args.loss,
        rule: None,
        engine: EngineArg::Sgd,
        batch: 1,
        workers: None,
        budget: args.budget,
        epochs_m: None,
        seed: args.seed,
        l2: args.l2,
        l2_metric: args.l2_metric,
    };
    let prep = prepare(&run_template)?;
    let mut summary = String::from(
        "method,batch,gamma,final_objective,final_test_error,seconds_to_target\n",
    );
    let mut all_runs = Vec::new();
    for &rule in &args.rules {
        for &batch in &args.batches {
            let mut run = run_template.clone();
            run.rule = Some(rule);
            run.batch = batch;
            let (metrics, divergence) = execute(&prep, &run, args.gamma)?;
            let name = format!("{}_b{}", metrics.method.replace('/', "_"), batch);
            let path = args.out_dir.join(format!("{name}.csv"));
            write_text(Some(&path), &metrics.to_csv())?;
            let cell = |v: f64| {
                if v.is_finite() {
                    v.to_string()
                } else {
                    v.to_string().to_lowercase()
                }
            };
            let last = metrics.final_checkpoint();
            let objective = last.map_or(f64::NAN, |c| c.objective);
            let test_error = last.and_then(|c| c.test_error).unwrap_or(f64::NAN);
            let gamma = metrics
                .config
                .get("gamma")
                .and_then(|v| v.as_f64())
                .unwrap_or(f64::NAN);
            let reach = match args.target {
                Some(target) => throughput_report(std::slice::from_ref(&metrics), target)
                    .pop()
                    .and_then(|row| row.seconds_to_target)
                    .map_or("nan".to_string(), |s| format!("{s:.6}")),
                None => "nan".to_string(),
            };
            let _ = writeln!(
                summary,
                "{},{batch},{},{},{},{reach}",
                metrics.method,
                cell(gamma),
                cell(objective),
                cell(test_error)
            );
            if divergence.is_some() {
                eprintln!("note: {} at B={batch} diverged; partial table written", metrics.method);
            }
            all_runs.push(metrics);
        }
    }
    write_text(Some(&args.out_dir.join("summary.csv")), &summary)?;
    eprintln!(
        "wrote {} method tables and summary.csv to {}",
        all_runs.len(),
        args.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// verify-lemmas
// ---------------------------------------------------------------------------

struct VerifyReport {
    failures: Vec<String>,
}

impl VerifyReport {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("verify {name}: {} ({detail})", if pass { "ok" } else { "FAILED" });
        if !pass {
            self.failures.push(format!("{name}: {detail}"));
        }
    }
}

fn random_law(rng: &mut ChaCha8Rng) -> DiscreteLaw {
    let p0: f64 = rng.random_range(0.05..0.9);
    let frac: f64 = rng.random_range(0.1..0.9);
    let rest = 1.0 - p0;
    let nudge = |v: f64| if v.abs() < 1e-3 { v + 0.5 } else { v };
    let v1 = nudge(rng.random_range(-2.0..2.0));
    let mut v2 = nudge(rng.random_range(-2.0..2.0));
    if v2 == v1 {
        v2 += 0.25;
    }
    DiscreteLaw::new(&[(0.0, p0), (v1, rest * frac), (v2, rest * (1.0 - frac))])
        .expect("constructed probabilities sum to 1")
}

fn cmd_verify_lemmas(args: &VerifyArgs) -> Result<(), Failure> {
    if args.trials < 10_000 {
        return Err(usage("--trials must be at least 10000 for a meaningful band"));
    }
    let mut report = VerifyReport { failures: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(17));

    // Closed forms vs full enumeration.
    let mut max_dev = 0.0f64;
    for _ in 0..100 {
        let law = random_law(&mut rng);
        for n in 1..=8u32 {
            let (bf_mean, bf_second) = brute_force_moments(&law, n, 10_000_000)?;
            let mean = averaged_nonzero_mean(&law, n)?;
            let second = averaged_nonzero_second_moment(&law, n)?;
            for (a, b) in [(mean, bf_mean), (second, bf_second)] {
                max_dev = max_dev.max((a - b).abs() / f64::max(1.0, b.abs()));
            }
        }
    }
    report.check(
        "moment formulas vs enumeration",
        max_dev <= 1e-12,
        format!("max deviation {max_dev:.2e}, tolerance 1e-12"),
    );

    // Simple bound ≥ exact on a fresh random suite.
    let mut min_margin = f64::INFINITY;
    for _ in 0..100 {
        let law = random_law(&mut rng);
        for n in 1..=8u32 {
            let exact = averaged_nonzero_second_moment(&law, n)?;
            let bound = averaged_nonzero_second_moment_bound(&law, n)?;
            min_margin = min_margin.min(bound - exact);
        }
    }
    report.check(
        "simple second-moment bound dominates",
        min_margin >= -1e-12,
        format!("min margin {min_margin:.2e}"),
    );

    // Improved bound and its supporting inverse-count inequality on the
    // exact-binomial grid N ≤ 64, wherever N·p ≥ --np-min.
    let mut min_np5 = f64::INFINITY;
    let mut min_inv = f64::INFINITY;
    let mut points = 0u32;
    for ip in 1..=9 {
        let p = ip as f64 / 10.0;
        let law = DiscreteLaw::new(&[(0.0, 1.0 - p), (1.0, 0.4 * p), (-0.5, 0.6 * p)])
            .expect("fixed law");
        for n in 1..=64u32 {
            if (n as f64) * p < args.np_min {
                continue;
            }
            points += 1;
            let exact = averaged_nonzero_second_moment(&law, n)?;
            let improved = averaged_nonzero_second_moment_bound_np5(&law, n)?;
            min_np5 = min_np5.min(improved - exact);
            let inv = expected_inverse_active_count(p, n)?;
            min_inv = min_inv.min(5.0 / (n as f64 * p) - inv);
        }
    }
    report.check(
        "improved bound dominates where N·p is large",
        points > 0 && min_np5 >= -1e-12 && min_inv >= 0.0,
        format!(
            "{points} grid points, bound margin ≥ {min_np5:.2e}, \
             inverse-count margin ≥ {min_inv:.2e}"
        ),
    );

    // Merged-gradient expectation vs the reconditioned full gradient.
    let cfg = SynthConfig {
        dim: 20,
        n: 300,
        law: ProbLaw::UniformRange { lo: 0.05, hi: 0.6 },
        task: LossKind::Logistic,
        noise: 0.1,
        weight_scale: 1.0,
        seed: args.seed.wrapping_add(29),
    };
    let synth = gen_synthetic(&cfg)?;
    let stats = estimate_feature_probabilities(&synth.data)?;
    let w: Vec<f64> = (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut worst_fraction = 1.0f64;
    let mut worst_sigma = 0.0f64;
    for &b in &[2u32, 10, 50] {
        let mc = monte_carlo_merge_expectation(
            &synth.data,
            cfg.task,
            &stats,
            &w,
            b,
            args.trials,
            args.seed.wrapping_add(41 + b as u64),
        )?;
        worst_fraction = worst_fraction.min(mc.fraction_within(4.0));
        worst_sigma = worst_sigma.max(mc.max_sigmas());
    }
    report.check(
        "merged-gradient expectation within Monte Carlo band",
        worst_fraction >= 0.99,
        format!(
            "{:.1}% of coordinates within 4 standard errors (need ≥99%; worst \
             {worst_sigma:.2}σ, {} batches per size)",
            100.0 * worst_fraction,
            args.trials
        ),
    );

    if report.failures.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(Failure::Verification(report.failures.join("; ")))
    }
}

// ---------------------------------------------------------------------------
