//! Closed-loop Monte Carlo evaluation.
//!
//! Episode `i` of a batch draws every random choice from a ChaCha8 stream
//! keyed by `(seed, i)`, so results do not depend on the parallel schedule.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envelope::{self, BeliefEnvelope, PropagationConfig};
use crate::error::{Error, Result};
use crate::model::{bayes_update, Belief, History, Ipomdp, PointEmission, PROB_TOL};
use crate::shields::{FwdConfig, FwdSampleSet, ShieldContext, ShieldKind};

/// Residual below which a repaired row counts as stochastic.
const ROW_TOL: f64 = 1e-12;

/// The threshold grid of the standard sweep.
pub const DEFAULT_BETAS: [f64; 9] = [0.50, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Moves `w` (already inside the box) onto the simplex by bounded water-filling.
fn repair_row(lower: &[f64], upper: &[f64], w: &mut [f64]) {
    let slack = |delta: f64, x: f64, lo: f64, hi: f64| if delta > 0.0 { (hi - x).max(0.0) } else { (x - lo).max(0.0) };
    for _ in 0..64 {
        let delta = 1.0 - w.iter().sum::<f64>();
        if delta.abs() < ROW_TOL {
            return;
        }
        let total: f64 = (0..w.len()).map(|i| slack(delta, w[i], lower[i], upper[i])).sum();
        if total <= 0.0 {
            return;
        }
        let step = delta.signum() * (delta.abs() / total).min(1.0);
        for i in 0..w.len() {
            w[i] = (w[i] + step * slack(delta, w[i], lower[i], upper[i])).clamp(lower[i], upper[i]);
        }
    }
}

fn check_row(lower: &[f64], upper: &[f64]) -> Result<()> {
    let lower_sum: f64 = lower.iter().sum();
    let upper_sum: f64 = upper.iter().sum();
    if lower.len() != upper.len() || lower_sum > 1.0 + PROB_TOL || upper_sum < 1.0 - PROB_TOL {
        return Err(Error::InfeasibleRow { lower_sum, upper_sum });
    }
    Ok(())
}

/// Clamps `f(o)` into `[lower_o, upper_o]` and repairs the result onto the simplex.
/// Requires `Σ lower ≤ 1 ≤ Σ upper`.
pub fn project_to_row(lower: &[f64], upper: &[f64], f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..lower.len()).map(|o| f(o).clamp(lower[o], upper[o])).collect();
    repair_row(lower, upper, &mut w);
    w
}

/// A random stochastic row inside `[lower, upper]`: independent uniforms, then water-filling.
pub fn sample_admissible_row<R: Rng + ?Sized>(lower: &[f64], upper: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut w = vec![0.0; lower.len()];
    sample_admissible_row_into(lower, upper, rng, &mut w)?;
    Ok(w)
}

/// [`sample_admissible_row`] writing into `out`.
pub fn sample_admissible_row_into<R: Rng + ?Sized>(lower: &[f64], upper: &[f64], rng: &mut R, out: &mut [f64]) -> Result<()> {
    check_row(lower, upper)?;
    for ((w, &lo), &hi) in out.iter_mut().zip(lower).zip(upper) {
        *w = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    }
    repair_row(lower, upper, out);
    Ok(())
}

/// A full emission kernel with every row drawn by [`sample_admissible_row`].
pub fn sample_admissible_kernel<R: Rng + ?Sized>(model: &Ipomdp, rng: &mut R) -> Result<PointEmission> {
    let mut probs = Vec::with_capacity(model.n_states() * model.n_obs());
    for s in 0..model.n_states() {
        probs.extend(sample_admissible_row(
            model.emissions.lower_row(s),
            model.emissions.upper_row(s),
            rng,
        )?);
    }
    PointEmission::new(model.n_states(), model.n_obs(), probs)
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, &q) in p.iter().enumerate() {
        if q > 0.0 {
            if x < q {
                return i;
            }
            x -= q;
        }
    }
    p.iter().rposition(|&q| q > 0.0).unwrap_or(p.len() - 1)
}

/// How the environment produces observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerceptionRegime {
    /// A fresh admissible emission row at every step.
    UniformPerStep,
    /// One admissible kernel held fixed for the whole episode.
    AdversarialFixed { kernel: PointEmission },
}

impl PerceptionRegime {
    pub fn adversarial(model: &Ipomdp, kernel: PointEmission) -> Result<Self> {
        if !kernel.is_row_stochastic() || !model.emissions.contains(&kernel, PROB_TOL) {
            return Err(Error::InvalidArgument(
                "adversarial kernel must be row-stochastic and inside the intervals".into(),
            ));
        }
        Ok(PerceptionRegime::AdversarialFixed { kernel })
    }

    pub fn label(&self) -> &'static str {
        match self {
            PerceptionRegime::UniformPerStep => "uniform",
            PerceptionRegime::AdversarialFixed { .. } => "adversarial",
        }
    }

    fn observe<R: Rng + ?Sized>(&self, model: &Ipomdp, s: usize, rng: &mut R) -> Result<usize> {
        Ok(match self {
            PerceptionRegime::UniformPerStep => {
                let row = sample_admissible_row(model.emissions.lower_row(s), model.emissions.upper_row(s), rng)?;
                sample_categorical(&row, rng)
            }
            PerceptionRegime::AdversarialFixed { kernel } => sample_categorical(kernel.row(s), rng),
        })
    }
}

/// Observation-indexed action values; row `n_obs` is the pre-observation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub q: Vec<Vec<f64>>,
}

impl QTable {
    /// ε-greedy Q-learning on the unshielded model under uniform per-step perception.
    /// Reaching FAIL pays `-1`; surviving the horizon pays `+1`.
    pub fn train(model: &Ipomdp, episodes: usize, seed: u64) -> Result<Self> {
        let (na, no) = (model.n_actions(), model.n_obs());
        let mut q = vec![vec![0.0; na]; no + 1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lr, discount) = (0.1, 0.95);
        for ep in 0..episodes {
            let eps = (1.0 - ep as f64 / episodes.max(1) as f64).max(0.05);
            let mut s = sample_categorical(model.initial_belief.mass(), &mut rng);
            let mut key = no;
            for t in 0..model.horizon {
                let a = if rng.random::<f64>() < eps {
                    rng.random_range(0..na)
                } else {
                    argmax(&q[key])
                };
                s = sample_categorical(model.transitions.row(s, a), &mut rng);
                let (reward, done, next_key) = if model.labels.is_fail(s) {
                    (-1.0, true, key)
                } else {
                    let o = PerceptionRegime::UniformPerStep.observe(model, s, &mut rng)?;
                    let last = t + 1 == model.horizon;
                    (if last { 1.0 } else { 0.0 }, last, o)
                };
                let target = if done {
                    reward
                } else {
                    reward + discount * q[next_key].iter().copied().fold(f64::NEG_INFINITY, f64::max)
                };
                q[key][a] += lr * (target - q[key][a]);
                if done {
                    break;
                }
                key = next_key;
            }
        }
        Ok(Self { q })
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Controller {
    RandomPolicy,
    /// Tracks its own point-estimate belief and maximizes next-step mass in the core.
    GreedyOmega,
    TabularQ { table: QTable },
}

#[derive(Debug, Clone)]
enum ControllerState {
    Stateless,
    Belief(Belief),
    LastObs(Option<usize>),
}

impl Controller {
    fn start(&self, model: &Ipomdp) -> ControllerState {
        match self {
            Controller::RandomPolicy => ControllerState::Stateless,
            Controller::GreedyOmega => ControllerState::Belief(model.initial_belief.clone()),
            Controller::TabularQ { .. } => ControllerState::LastObs(None),
        }
    }

    fn propose<R: Rng + ?Sized>(&self, state: &ControllerState, ctx: &ShieldContext<'_>, rng: &mut R) -> usize {
        let na = ctx.model.n_actions();
        match (self, state) {
            (Controller::GreedyOmega, ControllerState::Belief(b)) => {
                let core: Vec<bool> = (0..ctx.model.n_states()).map(|s| !ctx.omega.allowed(s).is_empty()).collect();
                let mass: Vec<f64> = (0..na)
                    .map(|a| {
                        let y = ctx.model.transitions.push_forward(b.mass(), a);
                        y.iter().zip(&core).filter(|(_, &c)| c).map(|(p, _)| p).sum()
                    })
                    .collect();
                argmax(&mass)
            }
            (Controller::TabularQ { table }, ControllerState::LastObs(last)) => {
                argmax(&table.q[last.unwrap_or(ctx.model.n_obs())])
            }
            _ => rng.random_range(0..na),
        }
    }

    fn observe(&self, state: &mut ControllerState, ctx: &ShieldContext<'_>, a: usize, o: usize) {
        match state {
            ControllerState::Stateless => {}
            ControllerState::LastObs(last) => *last = Some(o),
            ControllerState::Belief(b) => {
                *b = bayes_update(b, a, o, &ctx.model.transitions, &ctx.zhat).unwrap_or_else(|_| {
                    Belief::normalized(ctx.model.transitions.push_forward(b.mass(), a))
                        .unwrap_or_else(|| Belief::uniform(ctx.model.n_states()))
                });
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Fail,
    Stuck,
    SafeComplete,
    /// Diagnostic: the shield state could not absorb an observation.
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: usize,
    /// `None` when the shield blocked every action.
    pub action: Option<usize>,
    pub observation: Option<usize>,
    pub admitted: usize,
    /// Observation update of the previous step plus action filtering at this one.
    pub latency_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub outcome: Outcome,
    pub steps: Vec<StepRecord>,
}

impl RolloutRecord {
    pub fn history(&self) -> History {
        History {
            steps: self
                .steps
                .iter()
                .filter_map(|s| Some((s.action?, s.observation?)))
                .collect(),
        }
    }
}

/// A runtime shield at a fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShieldSpec {
    pub kind: ShieldKind,
    pub beta: f64,
}

/// One closed-loop episode from a state drawn from b₀.
pub fn rollout<R: Rng + ?Sized>(
    ctx: &ShieldContext<'_>,
    spec: ShieldSpec,
    controller: &Controller,
    regime: &PerceptionRegime,
    rng: &mut R,
) -> Result<RolloutRecord> {
    let model = ctx.model;
    let mut shield = ctx.init(spec.kind)?;
    let mut cstate = controller.start(model);
    let mut s = sample_categorical(model.initial_belief.mass(), rng);
    let mut steps = Vec::with_capacity(model.horizon);
    let mut pending: Option<(usize, usize)> = None;
    for _ in 0..model.horizon {
        let clock = Instant::now();
        if let Some((a, o)) = pending.take() {
            if shield.step(ctx, a, o, rng).is_err() {
                return Ok(RolloutRecord {
                    outcome: Outcome::Inconsistent,
                    steps,
                });
            }
        }
        let admitted = shield.allowed(ctx, spec.beta)?;
        let latency_ns = clock.elapsed().as_nanos() as u64;
        let mut record = StepRecord {
            state: s,
            action: None,
            observation: None,
            admitted: admitted.len(),
            latency_ns,
        };
        if admitted.is_empty() {
            steps.push(record);
            return Ok(RolloutRecord {
                outcome: Outcome::Stuck,
                steps,
            });
        }
        let proposal = controller.propose(&cstate, ctx, rng);
        let a = if admitted.contains(&proposal) {
            proposal
        } else {
            admitted[rng.random_range(0..admitted.len())]
        };
        record.action = Some(a);
        s = sample_categorical(model.transitions.row(s, a), rng);
        if model.labels.is_fail(s) {
            steps.push(record);
            return Ok(RolloutRecord {
                outcome: Outcome::Fail,
                steps,
            });
        }
        let o = regime.observe(model, s, rng)?;
        record.observation = Some(o);
        steps.push(record);
        controller.observe(&mut cstate, ctx, a, o);
        pending = Some((a, o));
    }
    Ok(RolloutRecord {
        outcome: Outcome::SafeComplete,
        steps,
    })
}

/// The RNG of episode `i` under `seed`.
pub fn episode_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

/// Outcome counts of one (shield, β, regime) condition. Rates are over the
/// classified episodes; inconsistent episodes are counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub shield: ShieldKind,
    pub beta: f64,
    pub regime: String,
    pub episodes: usize,
    pub fail: usize,
    pub stuck: usize,
    pub safe: usize,
    pub inconsistent: usize,
    pub fail_rate: f64,
    pub stuck_rate: f64,
    pub safe_rate: f64,
    pub mean_latency_us: f64,
}

impl BatchRow {
    fn from_records(spec: ShieldSpec, regime: &PerceptionRegime, records: &[RolloutRecord]) -> Self {
        let count = |o: Outcome| records.iter().filter(|r| r.outcome == o).count();
        let (fail, stuck, safe) = (count(Outcome::Fail), count(Outcome::Stuck), count(Outcome::SafeComplete));
        let classified = fail + stuck + safe;
        let rate = |k: usize| if classified == 0 { 0.0 } else { k as f64 / classified as f64 };
        let latencies: Vec<u64> = records.iter().flat_map(|r| r.steps.iter().map(|s| s.latency_ns)).collect();
        let mean_latency_us = if latencies.is_empty() {
            0.0
        } else {
            latencies.iter().sum::<u64>() as f64 / latencies.len() as f64 / 1e3
        };
        Self {
            shield: spec.kind,
            beta: spec.beta,
            regime: regime.label().to_string(),
            episodes: records.len(),
            fail,
            stuck,
            safe,
            inconsistent: count(Outcome::Inconsistent),
            fail_rate: rate(fail),
            stuck_rate: rate(stuck),
            safe_rate: rate(safe),
            mean_latency_us,
        }
    }

    /// fail + stuck rate, the adversary's objective.
    pub fn unsafe_rate(&self) -> f64 {
        self.fail_rate + self.stuck_rate
    }
}

/// Runs `episodes` independent rollouts in parallel, returned in episode order.
pub fn run_episodes(
    ctx: &ShieldContext<'_>,
    spec: ShieldSpec,
    controller: &Controller,
    regime: &PerceptionRegime,
    episodes: usize,
    seed: u64,
) -> Result<Vec<RolloutRecord>> {
    (0..episodes as u64)
        .into_par_iter()
        .map(|i| rollout(ctx, spec, controller, regime, &mut episode_rng(seed, i)))
        .collect()
}

pub fn run_batch(
    ctx: &ShieldContext<'_>,
    spec: ShieldSpec,
    controller: &Controller,
    regime: &PerceptionRegime,
    episodes: usize,
    seed: u64,
) -> Result<BatchRow> {
    let records = run_episodes(ctx, spec, controller, regime, episodes, seed)?;
    Ok(BatchRow::from_records(spec, regime, &records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Minimum fail rate, then minimum stuck rate.
    LowFailure,
    /// Maximum safe rate, then lower fail, then lower stuck.
    MaxSafe,
}

/// Index of the selected row; ties go to the lower index.
pub fn select(rows: &[BatchRow], selector: Selector) -> Option<usize> {
    let key = |r: &BatchRow| match selector {
        Selector::LowFailure => (r.fail_rate, r.stuck_rate, 0.0),
        Selector::MaxSafe => (-r.safe_rate, r.fail_rate, r.stuck_rate),
    };
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if best.is_none_or(|b| key(r) < key(&rows[b])) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<BatchRow>,
    pub low_failure: Option<usize>,
    pub max_safe: Option<usize>,
}

/// One batch per β, all with the same seed.
pub fn sweep(
    ctx: &ShieldContext<'_>,
    kind: ShieldKind,
    controller: &Controller,
    regime: &PerceptionRegime,
    betas: &[f64],
    episodes: usize,
    seed: u64,
) -> Result<SweepResult> {
    let rows = betas
        .iter()
        .map(|&beta| run_batch(ctx, ShieldSpec { kind, beta }, controller, regime, episodes, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        low_failure: select(&rows, Selector::LowFailure),
        max_safe: select(&rows, Selector::MaxSafe),
        rows,
    })
}

/// Replays fixed action/observation histories open-loop and reports, per β,
/// how many would have blocked every action at some step.
pub fn replay_stuck(ctx: &ShieldContext<'_>, kind: ShieldKind, histories: &[History], betas: &[f64], seed: u64) -> Result<Vec<usize>> {
    let mut stuck = vec![0; betas.len()];
    for (i, h) in histories.iter().enumerate() {
        let mut rng = episode_rng(seed, i as u64);
        let mut state = ctx.init(kind)?;
        let mut blocked = vec![false; betas.len()];
        for step in 0..=h.steps.len() {
            for (k, &beta) in betas.iter().enumerate() {
                if !blocked[k] && state.allowed(ctx, beta)?.is_empty() {
                    blocked[k] = true;
                }
            }
            let Some(&(a, o)) = h.steps.get(step) else { break };
            if state.step(ctx, a, o, &mut rng).is_err() {
                break;
            }
        }
        for k in 0..betas.len() {
            stuck[k] += usize::from(blocked[k]);
        }
    }
    Ok(stuck)
}

/// Histories of unshielded uniformly random episodes, truncated at FAIL.
pub fn sample_histories(
    model: &Ipomdp,
    regime: &PerceptionRegime,
    count: usize,
    seed: u64,
) -> Result<Vec<History>> {
    (0..count as u64)
        .map(|i| {
            let mut rng = episode_rng(seed, i);
            let mut s = sample_categorical(model.initial_belief.mass(), &mut rng);
            let mut h = History::default();
            for _ in 0..model.horizon {
                let a = rng.random_range(0..model.n_actions());
                s = sample_categorical(model.transitions.row(s, a), &mut rng);
                if model.labels.is_fail(s) {
                    break;
                }
                h.push(a, regime.observe(model, s, &mut rng)?);
            }
            Ok(h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    pub rollouts: usize,
    /// Initial per-entry spread as a fraction of the interval width.
    pub initial_spread: f64,
}

impl Default for CeConfig {
    fn default() -> Self {
        Self {
            population: 30,
            elite_fraction: 0.2,
            iterations: 10,
            rollouts: 50,
            initial_spread: 0.5,
        }
    }
}

impl CeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2
            || !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0)
            || self.rollouts == 0
            || !(self.initial_spread > 0.0)
        {
            return Err(Error::InvalidArgument(format!("invalid cross-entropy config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeOutcome {
    pub kernel: PointEmission,
    /// fail + stuck rate of `kernel` over the common rollout streams.
    pub score: f64,
    pub point_estimate_score: f64,
    /// Best score after each iteration.
    pub trace: Vec<f64>,
}

fn truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    if hi <= lo {
        return lo;
    }
    if sd > 0.0 {
        if let Ok(normal) = Normal::new(mean, sd) {
            for _ in 0..64 {
                let x = normal.sample(rng);
                if (lo..=hi).contains(&x) {
                    return x;
                }
            }
        }
    }
    rng.random_range(lo..=hi)
}

/// Cross-entropy search over admissible fixed kernels maximizing fail + stuck.
/// Every candidate is scored on the same `rollouts` episode streams.
pub fn cross_entropy_adversary(
    ctx: &ShieldContext<'_>,
    spec: ShieldSpec,
    controller: &Controller,
    cfg: &CeConfig,
    seed: u64,
) -> Result<CeOutcome> {
    cfg.validate()?;
    let model = ctx.model;
    let (ns, no) = (model.n_states(), model.n_obs());
    let score = |kernel: &PointEmission| -> Result<f64> {
        let regime = PerceptionRegime::AdversarialFixed { kernel: kernel.clone() };
        Ok(run_batch(ctx, spec, controller, &regime, cfg.rollouts, seed)?.unsafe_rate())
    };
    let mut best = ctx.zhat.clone();
    let point_estimate_score = score(&best)?;
    let mut best_score = point_estimate_score;
    let mut mean: Vec<f64> = (0..ns).flat_map(|s| ctx.zhat.row(s).to_vec()).collect();
    let mut spread: Vec<f64> = (0..ns)
        .flat_map(|s| (0..no).map(move |o| (s, o)))
        .map(|(s, o)| cfg.initial_spread * (model.emissions.upper(s, o) - model.emissions.lower(s, o)))
        .collect();
    let mut rng = episode_rng(seed, u64::MAX);
    let n_elite = ((cfg.elite_fraction * cfg.population as f64).ceil() as usize).clamp(1, cfg.population);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut population = Vec::with_capacity(cfg.population);
        for _ in 0..cfg.population {
            let mut probs = Vec::with_capacity(ns * no);
            for s in 0..ns {
                let (lo, hi) = (model.emissions.lower_row(s), model.emissions.upper_row(s));
                let raw: Vec<f64> = (0..no)
                    .map(|o| truncated_normal(mean[s * no + o], spread[s * no + o], lo[o], hi[o], &mut rng))
                    .collect();
                probs.extend(project_to_row(lo, hi, |o| raw[o]));
            }
            population.push(PointEmission::new(ns, no, probs)?);
        }
        let scores = population.iter().map(&score).collect::<Result<Vec<f64>>>()?;
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
        if scores[order[0]] > best_score {
            best_score = scores[order[0]];
            best = population[order[0]].clone();
        }
        let elites = &order[..n_elite];
        for e in 0..ns * no {
            let (s, o) = (e / no, e % no);
            let vals: Vec<f64> = elites.iter().map(|&i| population[i].get(s, o)).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            mean[e] = m;
            spread[e] = var.sqrt();
        }
        trace.push(best_score);
    }
    Ok(CeOutcome {
        kernel: best,
        score: best_score,
        point_estimate_score,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

impl GapSummary {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let quantile = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let (i, frac) = (pos.floor() as usize, pos.fract());
            if i + 1 < v.len() {
                v[i] + frac * (v[i + 1] - v[i])
            } else {
                v[i]
            }
        };
        Some(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile(0.5),
            p90: quantile(0.9),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepGap {
    pub step: usize,
    pub trajectories: usize,
    pub mean_max_gap: f64,
    pub max_max_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarsenessReport {
    pub per_step: Vec<StepGap>,
    /// Over trajectories, of each trajectory's mean (over steps) max-gap.
    pub trajectory_max_gap: Option<GapSummary>,
    /// Over trajectories, of each trajectory's mean (over steps and actions) gap.
    pub trajectory_mean_gap: Option<GapSummary>,
    /// Smallest gap seen at any evaluated step and action.
    pub min_gap: f64,
    pub evaluated_steps: usize,
    /// Trajectories cut short because an observation could not be absorbed.
    pub truncated: usize,
}

/// Gap between the sampled and the envelope minimum safety score along each history.
pub fn coarseness_diagnostic(
    ctx: &ShieldContext<'_>,
    histories: &[History],
    fwd: FwdConfig,
    propagation: &PropagationConfig,
    seed: u64,
) -> Result<CoarsenessReport> {
    let model = ctx.model;
    let chi: Vec<Vec<f64>> = (0..model.n_actions()).map(|a| ctx.omega.chi_column(a)).collect();
    let traces: Vec<(Vec<(f64, f64, f64)>, bool)> = histories
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let mut rng = episode_rng(seed, i as u64);
            let mut env = BeliefEnvelope::point(&model.initial_belief);
            let mut set = FwdSampleSet::new(model.initial_belief.clone(), fwd)?;
            let mut gaps = Vec::with_capacity(h.len() + 1);
            let mut truncated = false;
            for step in 0..=h.len() {
                let per_action: Vec<f64> = chi
                    .iter()
                    .enumerate()
                    .map(|(a, c)| set.min_score(&ctx.omega, a) - envelope::min_safety_score(&env, c))
                    .collect();
                let max = per_action.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = per_action.iter().copied().fold(f64::INFINITY, f64::min);
                let mean = per_action.iter().sum::<f64>() / per_action.len() as f64;
                gaps.push((max, mean, min));
                let Some(&(a, o)) = h.steps.get(step) else { break };
                let next_env = envelope::propagate(&env, a, o, model, propagation);
                let next_set = crate::shields::fwd_sampling_step(&set, a, o, model, &ctx.zhat, &mut rng);
                match (next_env, next_set) {
                    (Ok(e), Ok(s)) => {
                        env = e;
                        set = s;
                    }
                    _ => {
                        truncated = true;
                        break;
                    }
                }
            }
            Ok((gaps, truncated))
        })
        .collect::<Result<Vec<_>>>()?;

    let horizon = traces.iter().map(|(g, _)| g.len()).max().unwrap_or(0);
    let per_step = (0..horizon)
        .map(|t| {
            let vals: Vec<f64> = traces.iter().filter_map(|(g, _)| g.get(t).map(|x| x.0)).collect();
            StepGap {
                step: t,
                trajectories: vals.len(),
                mean_max_gap: vals.iter().sum::<f64>() / vals.len() as f64,
                max_max_gap: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let per_traj_max: Vec<f64> = traces
        .iter()
        .filter(|(g, _)| !g.is_empty())
        .map(|(g, _)| g.iter().map(|x| x.0).sum::<f64>() / g.len() as f64)
        .collect();
    let per_traj_mean: Vec<f64> = traces
        .iter()
        .filter(|(g, _)| !g.is_empty())
        .map(|(g, _)| g.iter().map(|x| x.1).sum::<f64>() / g.len() as f64)
        .collect();
    let min_gap = traces
        .iter()
        .flat_map(|(g, _)| g.iter().map(|x| x.2))
        .fold(f64::INFINITY, f64::min);
    Ok(CoarsenessReport {
        per_step,
        trajectory_max_gap: GapSummary::of(&per_traj_max),
        trajectory_mean_gap: GapSummary::of(&per_traj_mean),
        min_gap,
        evaluated_steps: traces.iter().map(|(g, _)| g.len()).sum(),
        truncated: traces.iter().filter(|(_, t)| *t).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub shield: ShieldKind,
    pub steps: usize,
    pub mean_us: f64,
    pub median_us: f64,
}

/// Per-step shield latency, replaying the same unshielded histories through
/// every shield in turn. A step is one observation update plus action
/// filtering. Requires a context without the envelope cache.
pub fn timing_harness(
    ctx: &ShieldContext<'_>,
    kinds: &[ShieldKind],
    beta: f64,
    episodes: usize,
    seed: u64,
) -> Result<Vec<TimingRow>> {
    if ctx.memo.is_some() {
        return Err(Error::InvalidArgument("timing requires the envelope cache to be disabled".into()));
    }
    if episodes == 0 {
        return Ok(Vec::new());
    }
    let histories = sample_histories(ctx.model, &PerceptionRegime::UniformPerStep, episodes, seed)?;
    kinds
        .iter()
        .map(|&kind| {
            let mut lat: Vec<f64> = Vec::new();
            for (i, h) in histories.iter().enumerate() {
                let mut rng = episode_rng(seed, i as u64);
                let mut state = ctx.init(kind)?;
                for step in 0..=h.len() {
                    let clock = Instant::now();
                    if step > 0 {
                        let (a, o) = h.steps[step - 1];
                        if state.step(ctx, a, o, &mut rng).is_err() {
                            break;
                        }
                    }
                    std::hint::black_box(state.allowed(ctx, beta)?);
                    lat.push(clock.elapsed().as_nanos() as f64 / 1e3);
                }
            }
            let summary = GapSummary::of(&lat);
            Ok(TimingRow {
                shield: kind,
                steps: lat.len(),
                mean_us: summary.as_ref().map_or(0.0, |s| s.mean),
                median_us: summary.as_ref().map_or(0.0, |s| s.median),
            })
        })
        .collect()
}
