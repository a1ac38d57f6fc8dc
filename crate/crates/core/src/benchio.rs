//! Model files, counts ingestion and synthetic benchmark generators.
//!
//! Model files are versioned JSON keyed by names. Probabilities are written as
//! decimal strings in shortest round-trip form, so `parse(write(m)) == m`.
//! Entries that are not listed are zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::intervals::{self, Allocation, AlphaBudget, Combiner, CountsTable};
use crate::model::{
    validate_model, Belief, EmissionIntervals, Ipomdp, PointEmission, SafetyLabels, SpaceIndex, TransitionKernel,
};

pub const FORMAT_NAME: &str = "ipshield-model";
pub const FORMAT_VERSION: u32 = 1;

/// A probability written as a decimal string; numbers are accepted on input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prob(pub f64);

impl Serialize for Prob {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for Prob {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Number(f64),
        }
        match Repr::deserialize(de)? {
            Repr::Number(x) => Ok(Prob(x)),
            Repr::Text(t) => t
                .trim()
                .parse::<f64>()
                .map(Prob)
                .map_err(|_| serde::de::Error::custom(format!("'{t}' is not a decimal probability"))),
        }
    }
}

impl fmt::Display for Prob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionEntry {
    pub s: String,
    pub a: String,
    pub next: String,
    pub p: Prob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalEntry {
    pub s: String,
    pub o: String,
    pub lo: Prob,
    pub hi: Prob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionEntry {
    pub s: String,
    pub o: String,
    pub p: Prob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountEntry {
    pub s: String,
    pub o: String,
    pub k: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeliefEntry {
    pub s: String,
    pub p: Prob,
}

fn default_allocation() -> Allocation {
    Allocation::Uniform
}

fn default_combiner() -> Combiner {
    Combiner::UnionBound
}

/// Labeled counts plus the α budget used to turn them into intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountsSection {
    /// Per-state sample totals; states not listed use Σ_o k.
    #[serde(default)]
    pub totals: BTreeMap<String, u64>,
    pub counts: Vec<CountEntry>,
    pub alpha: Prob,
    #[serde(default = "default_allocation")]
    pub allocation: Allocation,
    #[serde(default = "default_combiner")]
    pub combiner: Combiner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionSource {
    Intervals(Vec<IntervalEntry>),
    Counts(CountsSection),
}

/// On-disk model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub states: Vec<String>,
    pub actions: Vec<String>,
    pub observations: Vec<String>,
    pub horizon: usize,
    pub transitions: Vec<TransitionEntry>,
    pub emissions: EmissionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_emission: Option<Vec<EmissionEntry>>,
    pub safe_core: Vec<String>,
    pub fail_states: Vec<String>,
    pub initial_belief: Vec<BeliefEntry>,
}

/// A parsed model and what was learned while building it.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub model: Ipomdp,
    /// Dataset-level confidence, for counts-bearing files.
    pub lambda: Option<f64>,
    pub vacuous_states: Vec<usize>,
    pub counts: Option<CountsTable>,
}

struct Names<'a> {
    what: &'a str,
    index: &'a SpaceIndex,
}

impl Names<'_> {
    fn get(&self, field: &str, name: &str) -> Result<usize> {
        self.index
            .index_of(name)
            .ok_or_else(|| Error::Parse(format!("{field}: unknown {} '{name}'", self.what)))
    }
}

fn set_once(seen: &mut BTreeSet<Vec<usize>>, key: Vec<usize>, field: &str) -> Result<()> {
    if seen.insert(key) {
        Ok(())
    } else {
        Err(Error::Parse(format!("{field}: duplicate entry")))
    }
}

impl ModelFile {
    /// Builds and validates the model.
    pub fn into_model(self) -> Result<LoadedModel> {
        if self.format != FORMAT_NAME {
            return Err(Error::Parse(format!("format: expected '{FORMAT_NAME}', found '{}'", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Parse(format!("version: unsupported version {}", self.version)));
        }
        let space = |field: &str, names: Vec<String>| {
            SpaceIndex::new(names).map_err(|e| Error::Parse(format!("{field}: {e}")))
        };
        let states = space("states", self.states)?;
        let actions = space("actions", self.actions)?;
        let observations = space("observations", self.observations)?;
        let (n, na, no) = (states.size(), actions.size(), observations.size());
        let sn = Names { what: "state", index: &states };
        let an = Names { what: "action", index: &actions };
        let on = Names { what: "observation", index: &observations };

        let mut transitions = TransitionKernel::zeros(n, na);
        let mut seen = BTreeSet::new();
        for (i, e) in self.transitions.iter().enumerate() {
            let field = format!("transitions[{i}]");
            let (s, a, next) = (sn.get(&field, &e.s)?, an.get(&field, &e.a)?, sn.get(&field, &e.next)?);
            set_once(&mut seen, vec![s, a, next], &field)?;
            transitions.set(s, a, next, e.p.0);
        }

        let mut lambda = None;
        let mut vacuous_states = Vec::new();
        let mut counts_table = None;
        let emissions = match self.emissions {
            EmissionSource::Intervals(entries) => {
                let (mut lo, mut hi) = (vec![0.0; n * no], vec![0.0; n * no]);
                let mut seen = BTreeSet::new();
                for (i, e) in entries.iter().enumerate() {
                    let field = format!("emissions.intervals[{i}]");
                    let (s, o) = (sn.get(&field, &e.s)?, on.get(&field, &e.o)?);
                    set_once(&mut seen, vec![s, o], &field)?;
                    lo[s * no + o] = e.lo.0;
                    hi[s * no + o] = e.hi.0;
                }
                EmissionIntervals::new(n, no, lo, hi)?
            }
            EmissionSource::Counts(section) => {
                let mut k = vec![vec![0u64; no]; n];
                let mut seen = BTreeSet::new();
                for (i, e) in section.counts.iter().enumerate() {
                    let field = format!("emissions.counts.counts[{i}]");
                    let (s, o) = (sn.get(&field, &e.s)?, on.get(&field, &e.o)?);
                    set_once(&mut seen, vec![s, o], &field)?;
                    k[s][o] = e.k;
                }
                let mut totals: Vec<u64> = k.iter().map(|row| row.iter().sum()).collect();
                for (name, &total) in &section.totals {
                    totals[sn.get("emissions.counts.totals", name)?] = total;
                }
                let table = CountsTable::with_totals(totals, k)?;
                let budget = AlphaBudget {
                    alpha_total: section.alpha.0,
                    allocation: section.allocation,
                    combiner: section.combiner,
                };
                let estimate = intervals::build_emission_intervals(&table, &budget)?;
                lambda = Some(estimate.lambda);
                vacuous_states = estimate.vacuous_states;
                counts_table = Some(table);
                estimate.intervals
            }
        };

        let point_emission = match self.point_emission {
            Some(entries) => {
                let mut probs = vec![0.0; n * no];
                let mut seen = BTreeSet::new();
                for (i, e) in entries.iter().enumerate() {
                    let field = format!("point_emission[{i}]");
                    let (s, o) = (sn.get(&field, &e.s)?, on.get(&field, &e.o)?);
                    set_once(&mut seen, vec![s, o], &field)?;
                    probs[s * no + o] = e.p.0;
                }
                Some(PointEmission::new(n, no, probs)?)
            }
            None => match &counts_table {
                Some(t) if vacuous_states.is_empty() => Some(intervals::point_estimate(t)?),
                _ => None,
            },
        };

        let label_set = |field: &str, names: &[String]| -> Result<BTreeSet<usize>> {
            names.iter().map(|name| sn.get(field, name)).collect()
        };
        let labels = SafetyLabels {
            safe_core: label_set("safe_core", &self.safe_core)?,
            fail_states: label_set("fail_states", &self.fail_states)?,
        };

        let mut b0 = vec![0.0; n];
        let mut seen = BTreeSet::new();
        for (i, e) in self.initial_belief.iter().enumerate() {
            let field = format!("initial_belief[{i}]");
            let s = sn.get(&field, &e.s)?;
            set_once(&mut seen, vec![s], &field)?;
            b0[s] = e.p.0;
        }
        let initial_belief =
            Belief::new(b0).map_err(|e| Error::Validation(vec![format!("initial_belief: {e}")]))?;

        let model = Ipomdp {
            states,
            actions,
            observations,
            transitions,
            emissions,
            point_emission,
            labels,
            initial_belief,
            horizon: self.horizon,
        };
        let violations = validate_model(&model);
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        Ok(LoadedModel {
            model,
            lambda,
            vacuous_states,
            counts: counts_table,
        })
    }

    /// Sparse interval-form file for a model.
    pub fn from_model(m: &Ipomdp) -> Self {
        let (n, na, no) = (m.n_states(), m.n_actions(), m.n_obs());
        let st = |s: usize| m.states.name(s).to_string();
        let ob = |o: usize| m.observations.name(o).to_string();
        let mut transitions = Vec::new();
        for s in 0..n {
            for a in 0..na {
                for (next, &p) in m.transitions.row(s, a).iter().enumerate() {
                    if p != 0.0 {
                        transitions.push(TransitionEntry {
                            s: st(s),
                            a: m.actions.name(a).to_string(),
                            next: st(next),
                            p: Prob(p),
                        });
                    }
                }
            }
        }
        let mut intervals = Vec::new();
        for s in 0..n {
            for o in 0..no {
                let (lo, hi) = (m.emissions.lower(s, o), m.emissions.upper(s, o));
                if lo != 0.0 || hi != 0.0 {
                    intervals.push(IntervalEntry {
                        s: st(s),
                        o: ob(o),
                        lo: Prob(lo),
                        hi: Prob(hi),
                    });
                }
            }
        }
        let point_emission = m.point_emission.as_ref().map(|z| {
            (0..n)
                .flat_map(|s| (0..no).map(move |o| (s, o)))
                .filter(|&(s, o)| z.get(s, o) != 0.0)
                .map(|(s, o)| EmissionEntry {
                    s: st(s),
                    o: ob(o),
                    p: Prob(z.get(s, o)),
                })
                .collect()
        });
        ModelFile {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            states: m.states.names().to_vec(),
            actions: m.actions.names().to_vec(),
            observations: m.observations.names().to_vec(),
            horizon: m.horizon,
            transitions,
            emissions: EmissionSource::Intervals(intervals),
            point_emission,
            safe_core: m.labels.safe_core.iter().map(|&s| st(s)).collect(),
            fail_states: m.labels.fail_states.iter().map(|&s| st(s)).collect(),
            initial_belief: m
                .initial_belief
                .mass()
                .iter()
                .enumerate()
                .filter(|(_, p)| **p != 0.0)
                .map(|(s, &p)| BeliefEntry { s: st(s), p: Prob(p) })
                .collect(),
        }
    }
}

pub fn parse_model(text: &str) -> Result<LoadedModel> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    file.into_model()
}

pub fn model_to_json(model: &Ipomdp) -> String {
    let mut out = serde_json::to_string_pretty(&ModelFile::from_model(model)).expect("model files serialize");
    out.push('\n');
    out
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_model(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_model(model: &Ipomdp, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_json(model)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Standalone counts table keyed by names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountsFile {
    pub states: Vec<String>,
    pub observations: Vec<String>,
    /// `k[s][o]` in the order of the name lists.
    pub k: Vec<Vec<u64>>,
    /// Per-state totals; defaults to the row sums.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<u64>>,
}

impl CountsFile {
    pub fn table(&self) -> Result<CountsTable> {
        if self.k.len() != self.states.len() || self.k.iter().any(|r| r.len() != self.observations.len()) {
            return Err(Error::InvalidCounts("count matrix does not match the name lists".into()));
        }
        match &self.n {
            Some(n) => CountsTable::with_totals(n.clone(), self.k.clone()),
            None => CountsTable::new(self.k.clone()),
        }
    }
}

/// `k[s,·] ~ Multinomial(n_s, Z*(·|s))`.
pub fn synthesize_counts<R: Rng + ?Sized>(z: &PointEmission, samples: &[u64], rng: &mut R) -> Result<CountsTable> {
    if samples.len() != z.n_states() {
        return Err(Error::InvalidArgument("one sample size per state".into()));
    }
    let mut k = Vec::with_capacity(z.n_states());
    for (s, &n) in samples.iter().enumerate() {
        let mut row = vec![0u64; z.n_obs()];
        let (mut left, mut mass) = (n, 1.0f64);
        for o in 0..z.n_obs() {
            let p = z.get(s, o);
            if left == 0 {
                break;
            }
            if o + 1 == z.n_obs() || p >= mass {
                row[o] = left;
                break;
            }
            let q = (p / mass).clamp(0.0, 1.0);
            let draw = Binomial::new(left, q).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            row[o] = draw.sample(rng);
            left -= row[o];
            mass -= p;
        }
        k.push(row);
    }
    CountsTable::new(k)
}

/// Where the emission intervals of a generated benchmark come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntervalSource {
    /// `[Z* − δ, Z* + δ]` clipped to [0, 1]; the point estimate is Z*.
    NoiseBudget { delta: f64 },
    /// Clopper–Pearson intervals from synthesized counts; the point estimate is k/n.
    Counts { samples: u64, alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchKind {
    /// Every cell is a state; obstacle cells are absorbing FAIL states.
    /// Observations report distance to the nearest obstacle: near (≤ 1), mid (2), far (≥ 3).
    ObstacleGrid {
        width: usize,
        height: usize,
        obstacles: Vec<(usize, usize)>,
        start: (usize, usize),
        slip: f64,
    },
    /// States are (cell, fuel) plus one absorbing crash state. Moving costs one
    /// unit of fuel; moving on an empty tank or into an obstacle crashes.
    /// Refueling at a station fills the tank. Observations see only the cell
    /// class: station, near an obstacle, border, open north half, open south
    /// half. Fuel and crash are never observed; crash emits like open south.
    RefuelLike {
        width: usize,
        height: usize,
        fuel_capacity: usize,
        obstacles: Vec<(usize, usize)>,
        stations: Vec<(usize, usize)>,
        start: (usize, usize),
        slip: f64,
    },
    /// Lateral track positions plus an off-track FAIL state on each side.
    /// Actions steer left/stay/right; with probability `drift` the vehicle
    /// additionally slides one cell either way. One observation per state,
    /// confused with its neighbours.
    LineFollow { width: usize, drift: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub kind: BenchKind,
    /// Ground truth `Z* = (1 − c)·onehot + c·uniform`.
    pub confusion: f64,
    pub intervals: IntervalSource,
    pub horizon: usize,
}

impl BenchmarkSpec {
    pub fn obstacle_grid() -> Self {
        Self {
            kind: BenchKind::ObstacleGrid {
                width: 5,
                height: 5,
                obstacles: vec![(1, 1), (1, 3), (3, 2)],
                start: (0, 0),
                slip: 0.1,
            },
            confusion: 0.3,
            intervals: IntervalSource::NoiseBudget { delta: 0.05 },
            horizon: 10,
        }
    }

    /// A 10×5 grid (50 states, 3 observations) with horizon 25. Envelope
    /// propagation cost grows with the reachable support, so latency
    /// comparisons use this size rather than the 5×5 default.
    pub fn obstacle_grid_large() -> Self {
        Self {
            kind: BenchKind::ObstacleGrid {
                width: 10,
                height: 5,
                obstacles: vec![(1, 2), (1, 6), (2, 9), (3, 4), (3, 8), (4, 1)],
                start: (0, 0),
                slip: 0.1,
            },
            horizon: 25,
            ..Self::obstacle_grid()
        }
    }

    pub fn refuel_like() -> Self {
        Self {
            kind: BenchKind::RefuelLike {
                width: 3,
                height: 3,
                fuel_capacity: 3,
                obstacles: vec![(1, 1)],
                stations: vec![(0, 0), (2, 2)],
                start: (0, 0),
                slip: 0.05,
            },
            confusion: 0.2,
            intervals: IntervalSource::NoiseBudget { delta: 0.05 },
            horizon: 10,
        }
    }

    pub fn line_follow() -> Self {
        Self {
            kind: BenchKind::LineFollow { width: 7, drift: 0.2 },
            confusion: 0.3,
            intervals: IntervalSource::NoiseBudget { delta: 0.05 },
            horizon: 10,
        }
    }
}

/// A generated benchmark with its ground-truth perception model.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub model: Ipomdp,
    pub z_true: PointEmission,
    pub counts: Option<CountsTable>,
    pub lambda: Option<f64>,
}

/// Dynamics, labels and observation classes before intervals are attached.
struct Skeleton {
    states: Vec<String>,
    actions: Vec<String>,
    observations: Vec<String>,
    transitions: TransitionKernel,
    /// Observation class of each state.
    class: Vec<usize>,
    fail: BTreeSet<usize>,
    start: usize,
}

const MOVES: [(&str, isize, isize); 4] = [("N", -1, 0), ("S", 1, 0), ("E", 0, 1), ("W", 0, -1)];

fn in_grid(width: usize, height: usize, (r, c): (usize, usize)) -> Result<()> {
    if r >= height || c >= width {
        return Err(Error::Spec(format!("cell ({r}, {c}) outside a {height}x{width} grid")));
    }
    Ok(())
}

/// Intended move with `1 − slip`, each perpendicular move with `slip / 2`; walls block.
fn slip_moves(width: usize, height: usize, (r, c): (usize, usize), m: usize, slip: f64) -> Vec<((usize, usize), f64)> {
    let perpendicular: [usize; 2] = if m < 2 { [2, 3] } else { [0, 1] };
    let target = |k: usize| {
        let (_, dr, dc) = MOVES[k];
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
            (r, c)
        } else {
            (nr as usize, nc as usize)
        }
    };
    let mut out = vec![(target(m), 1.0 - slip)];
    if slip > 0.0 {
        out.extend(perpendicular.iter().map(|&k| (target(k), slip / 2.0)));
    }
    out
}

fn manhattan_to(obstacles: &[(usize, usize)], (r, c): (usize, usize)) -> usize {
    obstacles
        .iter()
        .map(|&(orow, ocol)| r.abs_diff(orow) + c.abs_diff(ocol))
        .min()
        .unwrap_or(usize::MAX)
}

fn obstacle_grid(
    width: usize,
    height: usize,
    obstacles: &[(usize, usize)],
    start: (usize, usize),
    slip: f64,
) -> Result<Skeleton> {
    if width == 0 || height == 0 || !(0.0..1.0).contains(&slip) {
        return Err(Error::Spec("obstacle grid needs positive size and slip in [0, 1)".into()));
    }
    for &cell in obstacles.iter().chain([&start]) {
        in_grid(width, height, cell)?;
    }
    if obstacles.contains(&start) {
        return Err(Error::Spec("start cell is an obstacle".into()));
    }
    let idx = |(r, c): (usize, usize)| r * width + c;
    let n = width * height;
    let mut t = TransitionKernel::zeros(n, 4);
    let mut class = vec![0; n];
    let mut fail = BTreeSet::new();
    for r in 0..height {
        for c in 0..width {
            let s = idx((r, c));
            class[s] = match manhattan_to(obstacles, (r, c)) {
                0 | 1 => 0,
                2 => 1,
                _ => 2,
            };
            if obstacles.contains(&(r, c)) {
                fail.insert(s);
                for a in 0..4 {
                    t.set(s, a, s, 1.0);
                }
                continue;
            }
            for a in 0..4 {
                for (cell, p) in slip_moves(width, height, (r, c), a, slip) {
                    let next = idx(cell);
                    t.set(s, a, next, t.get(s, a, next) + p);
                }
            }
        }
    }
    Ok(Skeleton {
        states: (0..height).flat_map(|r| (0..width).map(move |c| format!("r{r}c{c}"))).collect(),
        actions: MOVES.iter().map(|m| m.0.to_string()).collect(),
        observations: vec!["near".into(), "mid".into(), "far".into()],
        transitions: t,
        class,
        fail,
        start: idx(start),
    })
}

#[allow(clippy::too_many_arguments)]
fn refuel_like(
    width: usize,
    height: usize,
    capacity: usize,
    obstacles: &[(usize, usize)],
    stations: &[(usize, usize)],
    start: (usize, usize),
    slip: f64,
) -> Result<Skeleton> {
    if width == 0 || height == 0 || capacity == 0 || !(0.0..1.0).contains(&slip) {
        return Err(Error::Spec("refuel grid needs positive size and capacity, slip in [0, 1)".into()));
    }
    for &cell in obstacles.iter().chain(stations).chain([&start]) {
        in_grid(width, height, cell)?;
    }
    if obstacles.contains(&start) || stations.iter().any(|s| obstacles.contains(s)) {
        return Err(Error::Spec("start and stations must not be obstacles".into()));
    }
    let levels = capacity + 1;
    let cells: Vec<(usize, usize)> = (0..height)
        .flat_map(|r| (0..width).map(move |c| (r, c)))
        .filter(|cell| !obstacles.contains(cell))
        .collect();
    let cell_index: BTreeMap<(usize, usize), usize> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let n = cells.len() * levels + 1;
    let crash = n - 1;
    let idx = |cell: (usize, usize), fuel: usize| cell_index[&cell] * levels + fuel;
    let mut t = TransitionKernel::zeros(n, 5);
    let mut class = vec![4; n];
    for &cell in &cells {
        let cls = if stations.contains(&cell) {
            0
        } else if manhattan_to(obstacles, cell) <= 1 {
            1
        } else if cell.0 == 0 || cell.1 == 0 || cell.0 + 1 == height || cell.1 + 1 == width {
            2
        } else if 2 * cell.0 < height {
            3
        } else {
            4
        };
        for fuel in 0..levels {
            let s = idx(cell, fuel);
            class[s] = cls;
            for a in 0..4 {
                if fuel == 0 {
                    t.set(s, a, crash, 1.0);
                    continue;
                }
                for (next, p) in slip_moves(width, height, cell, a, slip) {
                    let to = if obstacles.contains(&next) { crash } else { idx(next, fuel - 1) };
                    t.set(s, a, to, t.get(s, a, to) + p);
                }
            }
            let refuelled = if stations.contains(&cell) { capacity } else { fuel };
            t.set(s, 4, idx(cell, refuelled), 1.0);
        }
    }
    for a in 0..5 {
        t.set(crash, a, crash, 1.0);
    }
    let mut states: Vec<String> = Vec::with_capacity(n);
    for &(r, c) in &cells {
        for fuel in 0..levels {
            states.push(format!("r{r}c{c}f{fuel}"));
        }
    }
    states.push("crash".into());
    Ok(Skeleton {
        states,
        actions: ["N", "S", "E", "W", "refuel"].iter().map(|s| s.to_string()).collect(),
        observations: ["station", "near", "border", "open_north", "open_south"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        transitions: t,
        class,
        fail: BTreeSet::from([crash]),
        start: idx(start, capacity),
    })
}

fn line_follow(width: usize, drift: f64) -> Result<Skeleton> {
    if width < 3 || !(0.0..=1.0).contains(&drift) {
        return Err(Error::Spec("line follow needs width ≥ 3 and drift in [0, 1]".into()));
    }
    // states: 0 = off left, 1..=width track, width + 1 = off right
    let n = width + 2;
    let mut t = TransitionKernel::zeros(n, 3);
    for s in 0..n {
        for a in 0..3 {
            if s == 0 || s == n - 1 {
                t.set(s, a, s, 1.0);
                continue;
            }
            let target = (s as isize + a as isize - 1).clamp(0, n as isize - 1);
            for (shift, p) in [(0isize, 1.0 - drift), (-1, drift / 2.0), (1, drift / 2.0)] {
                if p > 0.0 {
                    let next = (target + shift).clamp(0, n as isize - 1) as usize;
                    t.set(s, a, next, t.get(s, a, next) + p);
                }
            }
        }
    }
    let mut states = vec!["off_left".to_string()];
    states.extend((0..width).map(|i| format!("lane{i}")));
    states.push("off_right".into());
    Ok(Skeleton {
        observations: states.iter().map(|s| format!("see_{s}")).collect(),
        states,
        actions: ["left", "stay", "right"].iter().map(|s| s.to_string()).collect(),
        transitions: t,
        class: (0..n).collect(),
        fail: BTreeSet::from([0, n - 1]),
        start: width.div_ceil(2),
    })
}

/// Ground truth for the skeleton; LineFollow spreads confusion over neighbours only.
fn ground_truth(sk: &Skeleton, confusion: f64, neighbour_only: bool) -> Result<PointEmission> {
    let (n, no) = (sk.states.len(), sk.observations.len());
    let mut probs = vec![0.0; n * no];
    for s in 0..n {
        let row = &mut probs[s * no..(s + 1) * no];
        let own = sk.class[s];
        if neighbour_only {
            let near: Vec<usize> = [own.wrapping_sub(1), own + 1].into_iter().filter(|&o| o < no).collect();
            row[own] = 1.0 - confusion;
            for &o in &near {
                row[o] += confusion / near.len() as f64;
            }
        } else {
            for (o, p) in row.iter_mut().enumerate() {
                *p = confusion / no as f64 + if o == own { 1.0 - confusion } else { 0.0 };
            }
        }
    }
    PointEmission::new(n, no, probs)
}

/// Deterministic in `(spec, seed)`; the seed only drives synthesized counts.
pub fn generate(spec: &BenchmarkSpec, seed: u64) -> Result<Generated> {
    if !(0.0..=1.0).contains(&spec.confusion) || spec.horizon == 0 {
        return Err(Error::Spec("confusion must lie in [0, 1] and horizon be positive".into()));
    }
    let (sk, neighbour_only) = match &spec.kind {
        BenchKind::ObstacleGrid {
            width,
            height,
            obstacles,
            start,
            slip,
        } => (obstacle_grid(*width, *height, obstacles, *start, *slip)?, false),
        BenchKind::RefuelLike {
            width,
            height,
            fuel_capacity,
            obstacles,
            stations,
            start,
            slip,
        } => (refuel_like(*width, *height, *fuel_capacity, obstacles, stations, *start, *slip)?, false),
        BenchKind::LineFollow { width, drift } => (line_follow(*width, *drift)?, true),
    };
    let z_true = ground_truth(&sk, spec.confusion, neighbour_only)?;
    let (n, no) = (sk.states.len(), sk.observations.len());
    let (emissions, point, counts, lambda) = match spec.intervals {
        IntervalSource::NoiseBudget { delta } => {
            if !(delta >= 0.0) {
                return Err(Error::Spec(format!("noise budget {delta} is negative")));
            }
            let lo = (0..n * no).map(|i| (z_true.get(i / no, i % no) - delta).max(0.0)).collect();
            let hi = (0..n * no).map(|i| (z_true.get(i / no, i % no) + delta).min(1.0)).collect();
            (EmissionIntervals::new(n, no, lo, hi)?, z_true.clone(), None, None)
        }
        IntervalSource::Counts { samples, alpha } => {
            if samples == 0 {
                return Err(Error::Spec("counts source needs at least one sample per state".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = synthesize_counts(&z_true, &vec![samples; n], &mut rng)?;
            let est = intervals::build_emission_intervals(&table, &AlphaBudget::uniform(alpha))?;
            let zhat = intervals::point_estimate(&table)?;
            (est.intervals, zhat, Some(table), Some(est.lambda))
        }
    };
    let fail = sk.fail.clone();
    let model = Ipomdp {
        states: SpaceIndex::new(sk.states)?,
        actions: SpaceIndex::new(sk.actions)?,
        observations: SpaceIndex::new(sk.observations)?,
        transitions: sk.transitions,
        emissions,
        point_emission: Some(point),
        labels: SafetyLabels {
            safe_core: (0..n).filter(|s| !fail.contains(s)).collect(),
            fail_states: fail,
        },
        initial_belief: Belief::point(n, sk.start),
        horizon: spec.horizon,
    };
    let violations = validate_model(&model);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(Generated {
        model,
        z_true,
        counts,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_specs() -> Vec<BenchmarkSpec> {
        vec![
            BenchmarkSpec::obstacle_grid(),
            BenchmarkSpec::obstacle_grid_large(),
            BenchmarkSpec::refuel_like(),
            BenchmarkSpec::line_follow(),
        ]
    }

    #[test]
    fn generators_validate_and_round_trip() {
        for spec in all_specs() {
            let g = generate(&spec, 7).unwrap();
            assert!(validate_model(&g.model).is_empty());
            let back = parse_model(&model_to_json(&g.model)).unwrap();
            assert_eq!(back.model, g.model);
        }
    }

    #[test]
    fn obstacle_grid_shape() {
        let g = generate(&BenchmarkSpec::obstacle_grid(), 7).unwrap();
        assert_eq!(g.model.n_states(), 25);
        assert_eq!(g.model.n_obs(), 3);
        assert_eq!(g.model.labels.fail_states.len(), 3);
    }

    #[test]
    fn zero_noise_gives_degenerate_intervals() {
        let mut spec = BenchmarkSpec::obstacle_grid();
        spec.intervals = IntervalSource::NoiseBudget { delta: 0.0 };
        spec.confusion = 0.0;
        let g = generate(&spec, 1).unwrap();
        assert!(g.model.emissions.is_degenerate());
        assert!((0..g.model.n_states()).all(|s| g.z_true.row(s).iter().any(|&p| p == 1.0)));
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = BenchmarkSpec::line_follow();
        spec.intervals = IntervalSource::Counts { samples: 200, alpha: 0.05 };
        assert_eq!(generate(&spec, 11).unwrap(), generate(&spec, 11).unwrap());
        assert!(generate(&spec, 11).unwrap().lambda.unwrap() > 0.94);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = model_to_json(&generate(&BenchmarkSpec::line_follow(), 1).unwrap().model);
        assert!(matches!(parse_model(&text[..text.len() / 2]), Err(Error::Parse(_))));
    }

    #[test]
    fn unknown_name_is_reported_with_field() {
        let mut file = ModelFile::from_model(&generate(&BenchmarkSpec::line_follow(), 1).unwrap().model);
        file.transitions[0].next = "nowhere".into();
        match file.into_model() {
            Err(Error::Parse(msg)) => assert!(msg.contains("transitions[0]") && msg.contains("nowhere")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn counts_file_reports_lambda() {
        let states: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let obs: Vec<String> = (0..4).map(|i| format!("o{i}")).collect();
        let mut file = ModelFile::from_model(&generate(&BenchmarkSpec::line_follow(), 1).unwrap().model);
        file.states = states.clone();
        file.observations = obs.clone();
        file.actions = vec!["go".into()];
        file.transitions = states
            .iter()
            .map(|s| TransitionEntry {
                s: s.clone(),
                a: "go".into(),
                next: s.clone(),
                p: Prob(1.0),
            })
            .collect();
        file.emissions = EmissionSource::Counts(CountsSection {
            totals: BTreeMap::new(),
            counts: states
                .iter()
                .flat_map(|s| obs.iter().map(move |o| (s.clone(), o.clone())))
                .map(|(s, o)| CountEntry { s, o, k: 25 })
                .collect(),
            alpha: Prob(0.08),
            allocation: Allocation::Uniform,
            combiner: Combiner::UnionBound,
        });
        file.point_emission = None;
        file.safe_core = states.clone();
        file.fail_states = vec![];
        file.initial_belief = vec![BeliefEntry {
            s: "s0".into(),
            p: Prob(1.0),
        }];
        let loaded = file.into_model().unwrap();
        assert!((loaded.lambda.unwrap() - 0.92).abs() < 1e-12);
        assert_eq!(loaded.model.point_emission.unwrap().get(0, 0), 0.25);
    }

    #[test]
    fn probabilities_round_trip_as_strings() {
        let json = serde_json::to_string(&Prob(0.1 + 0.2)).unwrap();
        assert_eq!(json, "\"0.30000000000000004\"");
        let back: Prob = serde_json::from_str(&json).unwrap();
        assert_eq!(back.0, 0.1 + 0.2);
        let number: Prob = serde_json::from_str("0.25").unwrap();
        assert_eq!(number.0, 0.25);
    }

    #[test]
    fn synthesized_counts_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = PointEmission::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.2, 0.3, 0.5]]).unwrap();
        let t = synthesize_counts(&z, &[0, 1000], &mut rng).unwrap();
        assert_eq!(t.rows()[0], vec![0, 0, 0]);
        assert_eq!(t.rows()[1].iter().sum::<u64>(), 1000);
        let t = synthesize_counts(&z, &[50, 0], &mut rng).unwrap();
        assert_eq!(t.rows()[0], vec![0, 50, 0]);
    }
}
