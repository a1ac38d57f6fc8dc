//! `ipshield` command-line driver.
//!
//! Exit codes: 0 on success, 1 when an input fails validation or a run cannot
//! complete, 2 on a usage error.

mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ipshield::benchio::{self, BenchmarkSpec, CountsFile, LoadedModel};
use ipshield::envelope::PropagationConfig;
use ipshield::intervals::{self, Allocation, AlphaBudget, Combiner};
use ipshield::model::{Ipomdp, PointEmission};
use ipshield::shields::{self, FwdConfig, ShieldContext, ShieldKind};
use ipshield::simulate::{self, BatchRow, CeConfig, Controller, PerceptionRegime, QTable, Selector, ShieldSpec};

use output::{Format, Manifest, Sink};

/// Errors surfaced to the user, tagged with their exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
}

impl From<ipshield::Error> for CliError {
    fn from(e: ipshield::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

const BATCH_COLUMNS: [&str; 8] = [
    "shield",
    "beta",
    "regime",
    "episodes",
    "fail_rate",
    "stuck_rate",
    "safe_rate",
    "mean_latency_us",
];

#[derive(Debug, Parser)]
#[command(name = "ipshield", version, about = "Belief-envelope shields for interval-POMDPs")]
struct Cli {
    /// Model file (JSON).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory. Without it the primary output goes to stdout and no manifest is written.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Load a model file and report its violations.
    Validate,
    /// Clopper–Pearson emission intervals from a counts table.
    Intervals(IntervalsArgs),
    /// Invariant core and perfect-perception shield.
    SynthShield(SynthArgs),
    /// Closed-loop rollouts of one shield at one threshold.
    Rollout(RolloutArgs),
    /// One batch of rollouts per threshold, with an operating-point selection.
    Sweep(SweepArgs),
    /// Cross-entropy search for a fixed admissible kernel that maximizes fail + stuck.
    Adversary(AdversaryArgs),
    /// Gap between sampled and envelope minimum safety scores.
    Coarseness(CoarsenessArgs),
    /// Per-step shield latency on replayed histories.
    Timing(TimingArgs),
    /// Synthetic benchmark model.
    Generate(GenerateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Intervals(_) => "intervals",
            Command::SynthShield(_) => "synth-shield",
            Command::Rollout(_) => "rollout",
            Command::Sweep(_) => "sweep",
            Command::Adversary(_) => "adversary",
            Command::Coarseness(_) => "coarseness",
            Command::Timing(_) => "timing",
            Command::Generate(_) => "generate",
        }
    }

    fn supports_csv(&self) -> bool {
        matches!(
            self,
            Command::Intervals(_) | Command::Rollout(_) | Command::Sweep(_) | Command::Timing(_)
        )
    }
}

fn probability(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{x} is outside [0, 1]"))
    }
}

fn open_unit(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if x > 0.0 && x < 1.0 {
        Ok(x)
    } else {
        Err(format!("{x} is outside (0, 1)"))
    }
}

fn positive_gamma(s: &str) -> Result<f64, String> {
    let x = probability(s)?;
    if x > 0.0 {
        Ok(x)
    } else {
        Err("gamma must be positive".into())
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum AllocationArg {
    Uniform,
    PerEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum CombinerArg {
    Union,
    Product,
}

#[derive(Debug, Args, Serialize)]
struct IntervalsArgs {
    /// Counts file: {"states", "observations", "k", optional "n"}.
    #[arg(long)]
    counts: PathBuf,
    /// Dataset-level miss budget.
    #[arg(long, value_parser = open_unit, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = AllocationArg::Uniform)]
    allocation: AllocationArg,
    /// Row-major per-entry levels, required with `--allocation per-entry`.
    #[arg(long, value_delimiter = ',')]
    alpha_entries: Vec<f64>,
    #[arg(long, value_enum, default_value_t = CombinerArg::Union)]
    combiner: CombinerArg,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    /// One-step mass required to stay in the invariant core.
    #[arg(long, value_parser = positive_gamma, default_value_t = 0.95)]
    gamma: f64,
    /// Also build the support-based shield and summarize its winning region.
    #[arg(long)]
    support: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum ShieldArg {
    Observation,
    Single,
    Envelope,
    Fwd,
    Support,
}

impl From<ShieldArg> for ShieldKind {
    fn from(s: ShieldArg) -> Self {
        match s {
            ShieldArg::Observation => ShieldKind::Observation,
            ShieldArg::Single => ShieldKind::Single,
            ShieldArg::Envelope => ShieldKind::Envelope,
            ShieldArg::Fwd => ShieldKind::Fwd,
            ShieldArg::Support => ShieldKind::Support,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum RegimeArg {
    Uniform,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum ControllerArg {
    Random,
    Greedy,
    Qlearn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum SelectArg {
    Lowfail,
    Maxsafe,
}

#[derive(Debug, Args, Serialize)]
struct ShieldSetup {
    #[arg(long, value_enum, default_value_t = ShieldArg::Envelope)]
    shield: ShieldArg,
    #[arg(long, value_parser = positive_gamma, default_value_t = 0.95)]
    gamma: f64,
    #[arg(long, value_enum, default_value_t = ControllerArg::Random)]
    controller: ControllerArg,
    /// Training episodes for `--controller qlearn`.
    #[arg(long, value_parser = positive, default_value_t = 2000)]
    q_episodes: usize,
    /// Disable the shared envelope cache, so latencies include propagation.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Debug, Args, Serialize)]
struct RegimeSetup {
    #[arg(long, value_enum, default_value_t = RegimeArg::Uniform)]
    regime: RegimeArg,
    /// Fixed kernel for the adversarial regime: an `adversary` output or a bare
    /// list of rows. Defaults to one admissible kernel drawn from the seed.
    #[arg(long)]
    kernel: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct RolloutArgs {
    #[command(flatten)]
    setup: ShieldSetup,
    #[command(flatten)]
    regime: RegimeSetup,
    #[arg(long, value_parser = probability, default_value_t = 0.8)]
    beta: f64,
    #[arg(long, value_parser = positive, default_value_t = 200)]
    episodes: usize,
}

#[derive(Debug, Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    setup: ShieldSetup,
    #[command(flatten)]
    regime: RegimeSetup,
    #[arg(long, value_delimiter = ',', value_parser = probability,
          default_values_t = simulate::DEFAULT_BETAS.to_vec())]
    betas: Vec<f64>,
    #[arg(long, value_enum, default_value_t = SelectArg::Lowfail)]
    select: SelectArg,
    #[arg(long, value_parser = positive, default_value_t = 200)]
    episodes: usize,
}

#[derive(Debug, Args, Serialize)]
struct AdversaryArgs {
    #[command(flatten)]
    setup: ShieldSetup,
    #[arg(long, value_parser = probability, default_value_t = 0.8)]
    beta: f64,
    #[arg(long, value_parser = positive, default_value_t = 30)]
    ce_pop: usize,
    #[arg(long, value_parser = open_unit, default_value_t = 0.2)]
    ce_elite: f64,
    #[arg(long, default_value_t = 10)]
    ce_iters: usize,
    /// Episodes scored per candidate kernel.
    #[arg(long, value_parser = positive, default_value_t = 50)]
    ce_rollouts: usize,
}

#[derive(Debug, Args, Serialize)]
struct CoarsenessArgs {
    #[arg(long, value_parser = positive_gamma, default_value_t = 0.95)]
    gamma: f64,
    /// Histories sampled from unshielded random episodes.
    #[arg(long, value_parser = positive, default_value_t = 50)]
    histories: usize,
    #[arg(long, value_parser = positive, default_value_t = 500)]
    fwd_budget: usize,
    #[arg(long, value_parser = positive, default_value_t = 100)]
    fwd_kernels: usize,
}

#[derive(Debug, Args, Serialize)]
struct TimingArgs {
    #[arg(long, value_parser = positive_gamma, default_value_t = 0.95)]
    gamma: f64,
    #[arg(long, value_parser = probability, default_value_t = 0.8)]
    beta: f64,
    #[arg(long, value_parser = positive, default_value_t = 20)]
    episodes: usize,
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [ShieldArg::Observation, ShieldArg::Single, ShieldArg::Fwd, ShieldArg::Envelope])]
    shields: Vec<ShieldArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum BenchArg {
    Obstacle,
    ObstacleLarge,
    Refuel,
    Linefollow,
}

#[derive(Debug, Args, Serialize)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    bench: BenchArg,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValidationReport {
    valid: bool,
    states: usize,
    actions: usize,
    observations: usize,
    horizon: usize,
    lambda: Option<f64>,
    vacuous_states: Vec<String>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntervalRow {
    state: String,
    observation: String,
    lower: f64,
    upper: f64,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntervalsReport {
    alpha: f64,
    lambda: f64,
    vacuous_states: Vec<String>,
    intervals: Vec<IntervalRow>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateActions {
    state: String,
    allowed: Vec<String>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupportSummary {
    reachable: usize,
    winning: usize,
    initial_winning: bool,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShieldReport {
    gamma: f64,
    core: Vec<String>,
    shield: Vec<StateActions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    support: Option<SupportSummary>,
}

/// The fixed CSV row of a rollout batch.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct BatchCsvRow {
    shield: String,
    beta: f64,
    regime: String,
    episodes: usize,
    fail_rate: f64,
    stuck_rate: f64,
    safe_rate: f64,
    mean_latency_us: f64,
}

impl From<&BatchRow> for BatchCsvRow {
    fn from(r: &BatchRow) -> Self {
        Self {
            shield: r.shield.name().to_string(),
            beta: r.beta,
            regime: r.regime.clone(),
            episodes: r.episodes,
            fail_rate: r.fail_rate,
            stuck_rate: r.stuck_rate,
            safe_rate: r.safe_rate,
            mean_latency_us: r.mean_latency_us,
        }
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepReport {
    selector: Selector,
    /// Index into `rows` of the selected operating point.
    selected: Option<usize>,
    rows: Vec<BatchRow>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TimingCsvRow {
    shield: String,
    steps: usize,
    mean_us: f64,
    median_us: f64,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruth {
    bench: String,
    seed: u64,
    z_true: PointEmission,
    lambda: Option<f64>,
}

fn require_model(cli: &Cli) -> Result<LoadedModel, CliError> {
    let path = cli
        .model
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{} needs --model <PATH>", cli.command.name())))?;
    Ok(benchio::load_model(path)?)
}

fn names(space: &ipshield::model::SpaceIndex, idx: impl IntoIterator<Item = usize>) -> Vec<String> {
    idx.into_iter().map(|i| space.name(i).to_string()).collect()
}

fn context<'m>(model: &'m Ipomdp, gamma: f64, kind: ShieldKind, cache: bool) -> Result<ShieldContext<'m>, CliError> {
    let ctx = ShieldContext::new(model, gamma, kind == ShieldKind::Support)?;
    Ok(if cache { ctx.memoized() } else { ctx })
}

fn controller(model: &Ipomdp, setup: &ShieldSetup, seed: u64) -> Result<Controller, CliError> {
    Ok(match setup.controller {
        ControllerArg::Random => Controller::RandomPolicy,
        ControllerArg::Greedy => Controller::GreedyOmega,
        ControllerArg::Qlearn => Controller::TabularQ {
            table: QTable::train(model, setup.q_episodes, seed)?,
        },
    })
}

fn read_kernel(path: &PathBuf) -> Result<PointEmission, CliError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum KernelFile {
        Outcome { kernel: PointEmission },
        Rows(PointEmission),
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    match serde_json::from_str::<KernelFile>(&text) {
        Ok(KernelFile::Outcome { kernel } | KernelFile::Rows(kernel)) => Ok(kernel),
        Err(e) => Err(CliError::Failed(format!("{}: not a kernel file: {e}", path.display()))),
    }
}

fn regime(model: &Ipomdp, r: &RegimeSetup, seed: u64) -> Result<PerceptionRegime, CliError> {
    match (r.regime, &r.kernel) {
        (RegimeArg::Uniform, None) => Ok(PerceptionRegime::UniformPerStep),
        (RegimeArg::Uniform, Some(_)) => Err(CliError::Usage("--kernel needs --regime adversarial".into())),
        (RegimeArg::Adversarial, Some(path)) => Ok(PerceptionRegime::adversarial(model, read_kernel(path)?)?),
        (RegimeArg::Adversarial, None) => {
            let mut rng = simulate::episode_rng(seed, u64::MAX - 1);
            let kernel = simulate::sample_admissible_kernel(model, &mut rng)?;
            Ok(PerceptionRegime::adversarial(model, kernel)?)
        }
    }
}

fn run(cli: &Cli, argv: Vec<String>) -> Result<(), CliError> {
    if cli.format == Format::Csv && !cli.command.supports_csv() {
        return Err(CliError::Usage(format!("--format csv is not available for {}", cli.command.name())));
    }
    let threads = configure_threads()?;
    let mut sink = Sink::new(cli.out.clone())?;
    let stem = cli.command.name();
    let seed = cli.seed;
    let csv = cli.format == Format::Csv;

    match &cli.command {
        Command::Validate => {
            let path = cli.model.as_ref().ok_or_else(|| CliError::Usage("validate needs --model <PATH>".into()))?;
            let loaded = match benchio::load_model(path) {
                Ok(l) => l,
                Err(ipshield::Error::Validation(v)) => {
                    return Err(CliError::Failed(format!(
                        "{} is not a valid model:\n  {}",
                        path.display(),
                        v.join("\n  ")
                    )))
                }
                Err(e) => return Err(e.into()),
            };
            let m = &loaded.model;
            let report = ValidationReport {
                valid: true,
                states: m.n_states(),
                actions: m.n_actions(),
                observations: m.n_obs(),
                horizon: m.horizon,
                lambda: loaded.lambda,
                vacuous_states: names(&m.states, loaded.vacuous_states.iter().copied()),
            };
            sink.json(stem, &report)?;
        }
        Command::Intervals(args) => {
            let text = std::fs::read_to_string(&args.counts)
                .map_err(|e| CliError::Failed(format!("{}: {e}", args.counts.display())))?;
            let file: CountsFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Failed(format!("{}: {e}", args.counts.display())))?;
            let table = file.table()?;
            let allocation = match (args.allocation, args.alpha_entries.is_empty()) {
                (AllocationArg::Uniform, true) => Allocation::Uniform,
                (AllocationArg::PerEntry, false) => Allocation::PerEntry(args.alpha_entries.clone()),
                (AllocationArg::Uniform, false) => {
                    return Err(CliError::Usage("--alpha-entries needs --allocation per-entry".into()))
                }
                (AllocationArg::PerEntry, true) => {
                    return Err(CliError::Usage("--allocation per-entry needs --alpha-entries".into()))
                }
            };
            let budget = AlphaBudget {
                alpha_total: args.alpha,
                allocation,
                combiner: match args.combiner {
                    CombinerArg::Union => Combiner::UnionBound,
                    CombinerArg::Product => Combiner::IndependenceProduct,
                },
            };
            let est = intervals::build_emission_intervals(&table, &budget)?;
            let rows: Vec<IntervalRow> = file
                .states
                .iter()
                .enumerate()
                .flat_map(|(s, sn)| {
                    let est = &est;
                    file.observations.iter().enumerate().map(move |(o, on)| IntervalRow {
                        state: sn.clone(),
                        observation: on.clone(),
                        lower: est.intervals.lower(s, o),
                        upper: est.intervals.upper(s, o),
                    })
                })
                .collect();
            if csv {
                sink.csv(stem, &["state", "observation", "lower", "upper"], &rows)?;
            } else {
                let report = IntervalsReport {
                    alpha: args.alpha,
                    lambda: est.lambda,
                    vacuous_states: est.vacuous_states.iter().map(|&s| file.states[s].clone()).collect(),
                    intervals: rows,
                };
                sink.json(stem, &report)?;
            }
        }
        Command::SynthShield(args) => {
            let loaded = require_model(cli)?;
            let m = &loaded.model;
            let core = shields::pcis_core(m, args.gamma)?;
            let omega = shields::omega_from_core(&core, args.gamma, &m.transitions);
            let support = if args.support {
                let region = shields::build_support_shield(m, &m.point_estimate())?;
                Some(SupportSummary {
                    reachable: region.reachable.len(),
                    winning: region.winning.len(),
                    initial_winning: region.is_winning(&region.initial),
                })
            } else {
                None
            };
            let report = ShieldReport {
                gamma: args.gamma,
                core: names(&m.states, core.iter().copied()),
                shield: (0..m.n_states())
                    .map(|s| StateActions {
                        state: m.states.name(s).to_string(),
                        allowed: names(&m.actions, omega.allowed(s).iter().copied()),
                    })
                    .collect(),
                support,
            };
            sink.json(stem, &report)?;
        }
        Command::Rollout(args) => {
            let loaded = require_model(cli)?;
            let m = &loaded.model;
            let kind = ShieldKind::from(args.setup.shield);
            let ctx = context(m, args.setup.gamma, kind, !args.setup.no_cache)?;
            let ctl = controller(m, &args.setup, seed)?;
            let reg = regime(m, &args.regime, seed)?;
            let spec = ShieldSpec { kind, beta: args.beta };
            let row = simulate::run_batch(&ctx, spec, &ctl, &reg, args.episodes, seed)?;
            if csv {
                sink.csv(stem, &BATCH_COLUMNS, &[BatchCsvRow::from(&row)])?;
            } else {
                sink.json(stem, &row)?;
            }
        }
        Command::Sweep(args) => {
            let loaded = require_model(cli)?;
            let m = &loaded.model;
            let kind = ShieldKind::from(args.setup.shield);
            let ctx = context(m, args.setup.gamma, kind, !args.setup.no_cache)?;
            let ctl = controller(m, &args.setup, seed)?;
            let reg = regime(m, &args.regime, seed)?;
            let result = simulate::sweep(&ctx, kind, &ctl, &reg, &args.betas, args.episodes, seed)?;
            let (selector, selected) = match args.select {
                SelectArg::Lowfail => (Selector::LowFailure, result.low_failure),
                SelectArg::Maxsafe => (Selector::MaxSafe, result.max_safe),
            };
            if let Some(i) = selected {
                eprintln!("selected beta = {} ({:?})", result.rows[i].beta, selector);
            }
            if csv {
                let rows: Vec<BatchCsvRow> = result.rows.iter().map(BatchCsvRow::from).collect();
                sink.csv(stem, &BATCH_COLUMNS, &rows)?;
            } else {
                sink.json(stem, &SweepReport { selector, selected, rows: result.rows })?;
            }
        }
        Command::Adversary(args) => {
            let loaded = require_model(cli)?;
            let m = &loaded.model;
            let kind = ShieldKind::from(args.setup.shield);
            let ctx = context(m, args.setup.gamma, kind, !args.setup.no_cache)?;
            let ctl = controller(m, &args.setup, seed)?;
            let cfg = CeConfig {
                population: args.ce_pop,
                elite_fraction: args.ce_elite,
                iterations: args.ce_iters,
                rollouts: args.ce_rollouts,
                ..CeConfig::default()
            };
            let out = simulate::cross_entropy_adversary(&ctx, ShieldSpec { kind, beta: args.beta }, &ctl, &cfg, seed)?;
            sink.json(stem, &out)?;
        }
        Command::Coarseness(args) => {
            let loaded = require_model(cli)?;
            let m = &loaded.model;
            let ctx = ShieldContext::new(m, args.gamma, false)?;
            let histories = simulate::sample_histories(m, &PerceptionRegime::UniformPerStep, args.histories, seed)?;
            let fwd = FwdConfig {
                budget: args.fwd_budget,
                kernels: args.fwd_kernels,
            };
            let report = simulate::coarseness_diagnostic(&ctx, &histories, fwd, &PropagationConfig::default(), seed)?;
            sink.json(stem, &report)?;
        }
        Command::Timing(args) => {
            let loaded = require_model(cli)?;
            let m = &loaded.model;
            let kinds: Vec<ShieldKind> = args.shields.iter().map(|&s| s.into()).collect();
            let ctx = ShieldContext::new(m, args.gamma, kinds.contains(&ShieldKind::Support))?;
            let rows = simulate::timing_harness(&ctx, &kinds, args.beta, args.episodes, seed)?;
            if csv {
                let rows: Vec<TimingCsvRow> = rows
                    .iter()
                    .map(|r| TimingCsvRow {
                        shield: r.shield.name().to_string(),
                        steps: r.steps,
                        mean_us: r.mean_us,
                        median_us: r.median_us,
                    })
                    .collect();
                sink.csv(stem, &["shield", "steps", "mean_us", "median_us"], &rows)?;
            } else {
                sink.json(stem, &rows)?;
            }
        }
        Command::Generate(args) => {
            let (bench, spec) = match args.bench {
                BenchArg::Obstacle => ("obstacle", BenchmarkSpec::obstacle_grid()),
                BenchArg::ObstacleLarge => ("obstacle_large", BenchmarkSpec::obstacle_grid_large()),
                BenchArg::Refuel => ("refuel", BenchmarkSpec::refuel_like()),
                BenchArg::Linefollow => ("linefollow", BenchmarkSpec::line_follow()),
            };
            let g = benchio::generate(&spec, seed)?;
            let text = benchio::model_to_json(&g.model);
            let reread = benchio::parse_model(&text)?;
            if reread.model != g.model {
                return Err(CliError::Failed("generated model does not read back to the same value".into()));
            }
            match sink.dir() {
                Some(dir) => {
                    let truth = GroundTruth {
                        bench: bench.to_string(),
                        seed,
                        z_true: g.z_true,
                        lambda: g.lambda,
                    };
                    let path = dir.join("model.json");
                    std::fs::write(&path, &text)
                        .map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))?;
                    sink.json("ground_truth", &truth)?;
                    return finish(cli, sink, stem, argv, threads, vec!["model.json".to_string()]);
                }
                None => print!("{text}"),
            }
        }
    }
    finish(cli, sink, stem, argv, threads, Vec::new())
}

fn finish(cli: &Cli, sink: Sink, stem: &str, argv: Vec<String>, threads: usize, extra: Vec<String>) -> Result<(), CliError> {
    let manifest = Manifest {
        tool: "ipshield".into(),
        cli_version: env!("CARGO_PKG_VERSION").into(),
        library_version: ipshield::VERSION.into(),
        model_format_version: benchio::FORMAT_VERSION,
        subcommand: stem.into(),
        argv,
        seed: cli.seed,
        threads,
        config: serde_json::json!({
            "model": cli.model,
            "format": cli.format,
            "command": cli.command,
        }),
        outputs: extra,
        created_unix_s: 0,
    };
    sink.finish(stem, manifest)
}

/// Sizes the global worker pool from IPSHIELD_THREADS (0 or unset: automatic).
fn configure_threads() -> Result<usize, CliError> {
    let n = match std::env::var("IPSHIELD_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("IPSHIELD_THREADS must be a nonnegative integer, found '{v}'")))?,
        Err(_) => 0,
    };
    if n > 0 {
        // Fails only if a pool already exists, which leaves the earlier size in place.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(n)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("usage error: {m}"),
                CliError::Failed(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}
