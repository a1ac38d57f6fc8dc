//! Perfect-perception shield synthesis and the five runtime shields.
//!
//! Every runtime shield reduces to a score over states: an action `a` is
//! admitted when the (worst-case) belief mass on states whose perfect shield
//! allows `a` reaches the threshold β.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Mutex;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envelope::{self, BeliefEnvelope, PropagationConfig};
use crate::error::{Error, Result};
use crate::model::{bayes_update, condition_prediction, Belief, History, Ipomdp, PointEmission, TransitionKernel};
use crate::simulate::sample_admissible_row_into;

/// Slack on every `score ≥ β` comparison, absorbing LP round-off.
pub const THRESHOLD_TOL: f64 = 1e-9;

/// Point-estimate entries at or below this count as zero for support tracking.
pub const SUPPORT_ZERO_TOL: f64 = 1e-12;

/// Default cap on explored supports.
pub const DEFAULT_SUPPORT_CAP: usize = 1 << 18;

/// Greatest fixed point of `C ← {s ∈ C : ∃a, Σ_{s′∈C} T(s,a,s′) ≥ γ}` from all non-FAIL states.
pub fn pcis_core(model: &Ipomdp, gamma: f64) -> Result<BTreeSet<usize>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("gamma = {gamma} outside (0, 1]")));
    }
    let n = model.n_states();
    let mut inside: Vec<bool> = (0..n).map(|s| !model.labels.is_fail(s)).collect();
    loop {
        let mut changed = false;
        for s in 0..n {
            if inside[s] && preserving_actions(s, &inside, gamma, &model.transitions).is_empty() {
                inside[s] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let core: BTreeSet<usize> = (0..n).filter(|&s| inside[s]).collect();
    if core.is_empty() {
        return Err(Error::EmptyCore { gamma });
    }
    Ok(core)
}

fn preserving_actions(s: usize, inside: &[bool], gamma: f64, t: &TransitionKernel) -> BTreeSet<usize> {
    (0..t.n_actions())
        .filter(|&a| {
            let mass: f64 = t.row(s, a).iter().zip(inside).filter(|(_, &c)| c).map(|(p, _)| p).sum();
            mass >= gamma
        })
        .collect()
}

/// Ω: the admissible actions of each true state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfectShield {
    allowed: Vec<BTreeSet<usize>>,
    n_actions: usize,
}

impl PerfectShield {
    pub fn new(n_actions: usize, allowed: Vec<BTreeSet<usize>>) -> Result<Self> {
        if allowed.iter().flatten().any(|&a| a >= n_actions) {
            return Err(Error::OutOfRange("allowed action index".into()));
        }
        Ok(Self { allowed, n_actions })
    }

    pub fn n_states(&self) -> usize {
        self.allowed.len()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn allowed(&self, s: usize) -> &BTreeSet<usize> {
        &self.allowed[s]
    }

    pub fn chi(&self, s: usize, a: usize) -> f64 {
        if self.allowed[s].contains(&a) {
            1.0
        } else {
            0.0
        }
    }

    /// χ_Ω(·, a) over states.
    pub fn chi_column(&self, a: usize) -> Vec<f64> {
        (0..self.n_states()).map(|s| self.chi(s, a)).collect()
    }

    /// φₐ(b) = Σ_s b(s)·χ_Ω(s, a).
    pub fn score(&self, b: &[f64], a: usize) -> f64 {
        b.iter().enumerate().filter(|(s, _)| self.allowed[*s].contains(&a)).map(|(_, p)| p).sum()
    }
}

/// `allowed[s] = {a : Σ_{s′∈C} T(s,a,s′) ≥ γ}` on C, empty elsewhere.
pub fn omega_from_core(core: &BTreeSet<usize>, gamma: f64, t: &TransitionKernel) -> PerfectShield {
    let inside: Vec<bool> = (0..t.n_states()).map(|s| core.contains(&s)).collect();
    let allowed = (0..t.n_states())
        .map(|s| {
            if inside[s] {
                preserving_actions(s, &inside, gamma, t)
            } else {
                BTreeSet::new()
            }
        })
        .collect();
    PerfectShield {
        allowed,
        n_actions: t.n_actions(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShieldConfig {
    beta: f64,
}

impl ShieldConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("beta = {beta} outside [0, 1]")));
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

fn admit(omega: &PerfectShield, beta: f64, score: impl Fn(usize) -> f64) -> Vec<usize> {
    (0..omega.n_actions()).filter(|&a| score(a) >= beta - THRESHOLD_TOL).collect()
}

/// Memoryless shield: posterior of a uniform prior after the single observation `o`.
pub fn observation_allowed(o: usize, zhat: &PointEmission, omega: &PerfectShield, beta: f64) -> Result<Vec<usize>> {
    let column = zhat.column(o);
    let total: f64 = column.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroEvidence {
            action: 0,
            observation: o,
            mass: total,
        });
    }
    let posterior: Vec<f64> = column.iter().map(|z| z / total).collect();
    Ok(admit(omega, beta, |a| omega.score(&posterior, a)))
}

pub fn single_belief_step(b: &Belief, a: usize, o: usize, model: &Ipomdp, zhat: &PointEmission) -> Result<Belief> {
    bayes_update(b, a, o, &model.transitions, zhat)
}

pub fn single_belief_allowed(b: &Belief, omega: &PerfectShield, beta: f64) -> Vec<usize> {
    admit(omega, beta, |a| omega.score(b.mass(), a))
}

pub fn envelope_shield_step(
    env: &BeliefEnvelope,
    a: usize,
    o: usize,
    model: &Ipomdp,
    cfg: &PropagationConfig,
) -> Result<BeliefEnvelope> {
    envelope::propagate(env, a, o, model, cfg)
}

pub fn envelope_allowed(env: &BeliefEnvelope, omega: &PerfectShield, beta: f64) -> Vec<usize> {
    admit(omega, beta, |a| envelope::min_safety_score(env, &omega.chi_column(a)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FwdConfig {
    /// Belief budget N.
    pub budget: usize,
    /// Kernels sampled per belief and step, K.
    pub kernels: usize,
}

impl Default for FwdConfig {
    fn default() -> Self {
        Self { budget: 500, kernels: 100 }
    }
}

/// Sampled under-approximation of the reachable beliefs.
///
/// `beliefs[0]` is the anchor: the belief propagated with the point-estimate
/// kernel, retained through pruning whenever it has positive evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwdSampleSet {
    beliefs: Vec<Belief>,
    cfg: FwdConfig,
}

impl FwdSampleSet {
    pub fn new(b0: Belief, cfg: FwdConfig) -> Result<Self> {
        if cfg.budget == 0 || cfg.kernels == 0 {
            return Err(Error::InvalidArgument("fwd-sampling needs N ≥ 1 and K ≥ 1".into()));
        }
        Ok(Self { beliefs: vec![b0], cfg })
    }

    pub fn beliefs(&self) -> &[Belief] {
        &self.beliefs
    }

    pub fn config(&self) -> FwdConfig {
        self.cfg
    }

    /// min over the set of φₐ.
    pub fn min_score(&self, omega: &PerfectShield, a: usize) -> f64 {
        self.beliefs
            .iter()
            .map(|b| omega.score(b.mass(), a))
            .fold(f64::INFINITY, f64::min)
    }
}

/// One step of forward sampling with the anchor updated by `zhat`.
pub fn fwd_sampling_step<R: Rng + ?Sized>(
    set: &FwdSampleSet,
    a: usize,
    o: usize,
    model: &Ipomdp,
    zhat: &PointEmission,
    rng: &mut R,
) -> Result<FwdSampleSet> {
    let n = model.n_states();
    let anchor = bayes_update(&set.beliefs[0], a, o, &model.transitions, zhat).ok();
    let mut candidates: Vec<Belief> = Vec::with_capacity(set.beliefs.len() * set.cfg.kernels);
    let mut w = vec![0.0; n];
    let mut row = vec![0.0; model.n_obs()];
    let fixed: Vec<bool> = (0..n)
        .map(|s| model.emissions.lower_row(s) == model.emissions.upper_row(s))
        .collect();
    for b in &set.beliefs {
        let y = model.transitions.push_forward(b.mass(), a);
        for _ in 0..set.cfg.kernels {
            for s in 0..n {
                let (lo, hi) = (model.emissions.lower_row(s), model.emissions.upper_row(s));
                w[s] = if y[s] == 0.0 {
                    0.0
                } else if fixed[s] {
                    lo[o]
                } else {
                    sample_admissible_row_into(lo, hi, rng, &mut row)?;
                    row[o]
                };
            }
            if let Ok(post) = condition_prediction(&y, &w) {
                candidates.push(post);
            }
        }
    }
    if anchor.is_none() && candidates.is_empty() {
        return Err(Error::InconsistentObservation {
            action: a,
            observation: o,
            max_evidence: 0.0,
        });
    }
    let beliefs = prune(anchor, candidates, set.cfg.budget, n, rng);
    Ok(FwdSampleSet { beliefs, cfg: set.cfg })
}

/// Keeps the anchor, per-coordinate argmin/argmax, then a uniform random fill up to `budget`.
fn prune<R: Rng + ?Sized>(
    anchor: Option<Belief>,
    candidates: Vec<Belief>,
    budget: usize,
    n_states: usize,
    rng: &mut R,
) -> Vec<Belief> {
    let mut out: Vec<Belief> = anchor.into_iter().collect();
    if out.len() + candidates.len() <= budget {
        out.extend(candidates);
        return out;
    }
    let mut keep = vec![false; candidates.len()];
    let mut chosen: Vec<usize> = Vec::new();
    for s in 0..n_states {
        let by = |i: &usize, j: &usize| candidates[*i].mass()[s].total_cmp(&candidates[*j].mass()[s]);
        let lo = (0..candidates.len()).min_by(by).expect("nonempty");
        let hi = (0..candidates.len()).max_by(by).expect("nonempty");
        for i in [lo, hi] {
            if !keep[i] {
                keep[i] = true;
                chosen.push(i);
            }
        }
    }
    chosen.truncate(budget - out.len());
    let room = budget - out.len() - chosen.len();
    let leftovers: Vec<usize> = (0..candidates.len()).filter(|&i| !keep[i]).collect();
    let fill = sample_indices(rng, leftovers.len(), room.min(leftovers.len()));
    let mut fill: Vec<usize> = fill.into_iter().map(|k| leftovers[k]).collect();
    fill.sort_unstable();
    chosen.extend(fill);
    let mut slots: Vec<Option<Belief>> = candidates.into_iter().map(Some).collect();
    out.extend(chosen.into_iter().map(|i| slots[i].take().expect("chosen once")));
    out
}

pub fn fwd_sampling_allowed(set: &FwdSampleSet, omega: &PerfectShield, beta: f64) -> Vec<usize> {
    admit(omega, beta, |a| set.min_score(omega, a))
}

/// A set of states as a bitset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Support(Vec<u64>);

impl Support {
    pub fn empty(n_states: usize) -> Self {
        Support(vec![0; n_states.div_ceil(64).max(1)])
    }

    pub fn from_states(n_states: usize, states: impl IntoIterator<Item = usize>) -> Self {
        let mut out = Self::empty(n_states);
        for s in states {
            out.insert(s);
        }
        out
    }

    pub fn insert(&mut self, s: usize) {
        self.0[s / 64] |= 1 << (s % 64);
    }

    pub fn contains(&self, s: usize) -> bool {
        self.0[s / 64] >> (s % 64) & 1 == 1
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|w| *w == 0)
    }

    pub fn states(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (k, &word) in self.0.iter().enumerate() {
            let mut w = word;
            while w != 0 {
                let bit = w.trailing_zeros() as usize;
                out.push(64 * k + bit);
                w &= w - 1;
            }
        }
        out
    }
}

/// `U′ = {s′ : Ẑ(o|s′) > 0, ∃s ∈ U with T(s,a,s′) > 0}`.
pub fn support_successor(u: &Support, a: usize, o: usize, t: &TransitionKernel, zhat: &PointEmission) -> Support {
    let n = t.n_states();
    let mut out = Support::empty(n);
    for s in u.states() {
        for (next, &p) in t.row(s, a).iter().enumerate() {
            if p > 0.0 && zhat.get(next, o) > SUPPORT_ZERO_TOL {
                out.insert(next);
            }
        }
    }
    out
}

/// Reachable supports and the winning ones with their witnessing actions.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportWinningRegion {
    pub initial: Support,
    pub reachable: BTreeSet<Support>,
    /// Winning support → actions whose every nonempty successor is winning.
    pub winning: BTreeMap<Support, BTreeSet<usize>>,
    pub transitions: HashMap<(Support, usize, usize), Support>,
}

impl SupportWinningRegion {
    pub fn is_winning(&self, u: &Support) -> bool {
        self.winning.contains_key(u)
    }

    pub fn is_empty(&self) -> bool {
        self.winning.is_empty()
    }
}

pub fn build_support_shield(model: &Ipomdp, zhat: &PointEmission) -> Result<SupportWinningRegion> {
    build_support_shield_capped(model, zhat, DEFAULT_SUPPORT_CAP)
}

/// BFS over supports from supp(b₀), then the greatest winning fixed point.
pub fn build_support_shield_capped(model: &Ipomdp, zhat: &PointEmission, cap: usize) -> Result<SupportWinningRegion> {
    let n = model.n_states();
    let (na, no) = (model.n_actions(), model.n_obs());
    let initial = Support::from_states(n, model.initial_belief.support());
    let mut reachable = BTreeSet::from([initial.clone()]);
    let mut transitions = HashMap::new();
    let mut queue = VecDeque::from([initial.clone()]);
    while let Some(u) = queue.pop_front() {
        for a in 0..na {
            for o in 0..no {
                let next = support_successor(&u, a, o, &model.transitions, zhat);
                if next.is_empty() {
                    continue;
                }
                if reachable.insert(next.clone()) {
                    if reachable.len() > cap {
                        return Err(Error::SupportExplosion { cap });
                    }
                    queue.push_back(next.clone());
                }
                transitions.insert((u.clone(), a, o), next);
            }
        }
    }

    let mut alive: BTreeSet<Support> = reachable
        .iter()
        .filter(|u| !u.states().iter().any(|&s| model.labels.is_fail(s)))
        .cloned()
        .collect();
    let witnesses = |u: &Support, alive: &BTreeSet<Support>| -> BTreeSet<usize> {
        (0..na)
            .filter(|&a| (0..no).all(|o| transitions.get(&(u.clone(), a, o)).is_none_or(|v| alive.contains(v))))
            .collect()
    };
    loop {
        let dead: Vec<Support> = alive.iter().filter(|u| witnesses(u, &alive).is_empty()).cloned().collect();
        if dead.is_empty() {
            break;
        }
        for u in dead {
            alive.remove(&u);
        }
    }
    let winning = alive.iter().map(|u| (u.clone(), witnesses(u, &alive))).collect();
    Ok(SupportWinningRegion {
        initial,
        reachable,
        winning,
        transitions,
    })
}

pub fn support_allowed(u: &Support, region: &SupportWinningRegion) -> Vec<usize> {
    region.winning.get(u).map(|w| w.iter().copied().collect()).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShieldKind {
    Observation,
    Single,
    Envelope,
    Fwd,
    Support,
}

impl ShieldKind {
    pub const ALL: [ShieldKind; 5] = [
        ShieldKind::Observation,
        ShieldKind::Single,
        ShieldKind::Envelope,
        ShieldKind::Fwd,
        ShieldKind::Support,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShieldKind::Observation => "observation",
            ShieldKind::Single => "single",
            ShieldKind::Envelope => "envelope",
            ShieldKind::Fwd => "fwd",
            ShieldKind::Support => "support",
        }
    }
}

impl std::str::FromStr for ShieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShieldKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shield '{s}'")))
    }
}

/// Envelope states keyed by history. Propagation is deterministic, so sharing
/// the cache across episodes and thresholds does not change any result.
#[derive(Debug, Default)]
pub struct EnvelopeMemo {
    map: Mutex<HashMap<History, Result<BeliefEnvelope>>>,
}

impl EnvelopeMemo {
    pub fn len(&self) -> usize {
        self.map.lock().expect("memo lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Read-only data shared by every runtime shield on one model.
pub struct ShieldContext<'m> {
    pub model: &'m Ipomdp,
    pub omega: PerfectShield,
    pub zhat: PointEmission,
    pub propagation: PropagationConfig,
    pub fwd: FwdConfig,
    pub support: Option<SupportWinningRegion>,
    pub memo: Option<EnvelopeMemo>,
}

impl<'m> ShieldContext<'m> {
    /// Builds Ω from the γ-core and the point-estimate kernel; the support
    /// region is built only when `with_support` is set.
    pub fn new(model: &'m Ipomdp, gamma: f64, with_support: bool) -> Result<Self> {
        let core = pcis_core(model, gamma)?;
        let omega = omega_from_core(&core, gamma, &model.transitions);
        Self::with_omega(model, omega, with_support)
    }

    pub fn with_omega(model: &'m Ipomdp, omega: PerfectShield, with_support: bool) -> Result<Self> {
        let zhat = model.point_estimate();
        let support = if with_support {
            Some(build_support_shield(model, &zhat)?)
        } else {
            None
        };
        Ok(Self {
            model,
            omega,
            zhat,
            propagation: PropagationConfig::default(),
            fwd: FwdConfig::default(),
            support,
            memo: None,
        })
    }

    /// Enables the shared envelope cache.
    pub fn memoized(mut self) -> Self {
        self.memo = Some(EnvelopeMemo::default());
        self
    }

    pub fn init(&self, kind: ShieldKind) -> Result<ShieldState> {
        let b0 = self.model.initial_belief.clone();
        Ok(match kind {
            ShieldKind::Observation => ShieldState::Observation { last: None },
            ShieldKind::Single => ShieldState::Single(b0),
            ShieldKind::Envelope => ShieldState::Envelope {
                env: BeliefEnvelope::point(&b0),
                history: History::default(),
            },
            ShieldKind::Fwd => ShieldState::Fwd(FwdSampleSet::new(b0, self.fwd)?),
            ShieldKind::Support => {
                let region = self
                    .support
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("support region not built".into()))?;
                ShieldState::Support(region.initial.clone())
            }
        })
    }

    fn propagate_memo(&self, env: &BeliefEnvelope, history: &History, a: usize, o: usize) -> Result<BeliefEnvelope> {
        let Some(memo) = &self.memo else {
            return envelope_shield_step(env, a, o, self.model, &self.propagation);
        };
        let mut key = history.clone();
        key.push(a, o);
        if let Some(hit) = memo.map.lock().expect("memo lock").get(&key) {
            return hit.clone();
        }
        let out = envelope_shield_step(env, a, o, self.model, &self.propagation);
        memo.map.lock().expect("memo lock").insert(key, out.clone());
        out
    }
}

/// Per-episode runtime shield state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShieldState {
    /// Before the first observation the initial belief stands in for the posterior.
    Observation { last: Option<usize> },
    Single(Belief),
    Envelope { env: BeliefEnvelope, history: History },
    Fwd(FwdSampleSet),
    Support(Support),
}

impl ShieldState {
    pub fn kind(&self) -> ShieldKind {
        match self {
            ShieldState::Observation { .. } => ShieldKind::Observation,
            ShieldState::Single(_) => ShieldKind::Single,
            ShieldState::Envelope { .. } => ShieldKind::Envelope,
            ShieldState::Fwd(_) => ShieldKind::Fwd,
            ShieldState::Support(_) => ShieldKind::Support,
        }
    }

    pub fn allowed(&self, ctx: &ShieldContext<'_>, beta: f64) -> Result<Vec<usize>> {
        Ok(match self {
            ShieldState::Observation { last: Some(o) } => observation_allowed(*o, &ctx.zhat, &ctx.omega, beta)?,
            ShieldState::Observation { last: None } => single_belief_allowed(&ctx.model.initial_belief, &ctx.omega, beta),
            ShieldState::Single(b) => single_belief_allowed(b, &ctx.omega, beta),
            ShieldState::Envelope { env, .. } => envelope_allowed(env, &ctx.omega, beta),
            ShieldState::Fwd(set) => fwd_sampling_allowed(set, &ctx.omega, beta),
            ShieldState::Support(u) => {
                let region = ctx
                    .support
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("support region not built".into()))?;
                support_allowed(u, region)
            }
        })
    }

    pub fn step<R: Rng + ?Sized>(&mut self, ctx: &ShieldContext<'_>, a: usize, o: usize, rng: &mut R) -> Result<()> {
        match self {
            ShieldState::Observation { last } => *last = Some(o),
            ShieldState::Single(b) => *b = single_belief_step(b, a, o, ctx.model, &ctx.zhat)?,
            ShieldState::Envelope { env, history } => {
                *env = ctx.propagate_memo(env, history, a, o)?;
                history.push(a, o);
            }
            ShieldState::Fwd(set) => *set = fwd_sampling_step(set, a, o, ctx.model, &ctx.zhat, rng)?,
            ShieldState::Support(u) => {
                let next = support_successor(u, a, o, &ctx.model.transitions, &ctx.zhat);
                if next.is_empty() {
                    return Err(Error::InconsistentObservation {
                        action: a,
                        observation: o,
                        max_evidence: 0.0,
                    });
                }
                *u = next;
            }
        }
        Ok(())
    }
}
