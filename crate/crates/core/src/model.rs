//! Finite interval-POMDP data model and exact single-belief Bayes filtering.
//!
//! All matrices are dense and row-major. A model is immutable once built; the
//! filtering routines are pure functions over borrowed data.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::envelope::BeliefEnvelope;
use crate::error::{Error, Result};

/// Row-sum tolerance for stochastic vectors.
pub const PROB_TOL: f64 = 1e-9;

/// Below this evidence mass an observation is treated as impossible.
pub const ZERO_EVIDENCE_TOL: f64 = 1e-12;

/// Dense, 0-based name index for states, actions or observations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceIndex {
    names: Vec<String>,
}

impl SpaceIndex {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidArgument("empty name list".into()));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate name '{n}'")));
            }
        }
        Ok(Self { names })
    }

    /// Names `prefix0 .. prefix{n-1}`.
    pub fn numbered(prefix: &str, n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| format!("{prefix}{i}")))
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// T(s, a, s') stored as `[s][a][s']`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TransitionKernel {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions * n_states {
            return Err(Error::InvalidArgument(format!(
                "transition array has {} entries, expected {}",
                probs.len(),
                n_states * n_actions * n_states
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![0.0; n_states * n_actions * n_states],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize, next: usize) -> f64 {
        self.probs[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn set(&mut self, s: usize, a: usize, next: usize, p: f64) {
        let idx = (s * self.n_actions + a) * self.n_states + next;
        self.probs[idx] = p;
    }

    /// Successor distribution T(s, a, ·).
    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.probs[start..start + self.n_states]
    }

    pub fn row_mut(&mut self, s: usize, a: usize) -> &mut [f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &mut self.probs[start..start + self.n_states]
    }

    /// Push-forward y = Tₐᵀ b.
    pub fn push_forward(&self, b: &[f64], a: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.n_states];
        for (s, &mass) in b.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (yn, &p) in y.iter_mut().zip(self.row(s, a)) {
                *yn += mass * p;
            }
        }
        y
    }
}

/// A dense (state, observation) matrix.
#[derive(Debug, Clone, PartialEq)]
struct ObsMatrix {
    n_states: usize,
    n_obs: usize,
    data: Vec<f64>,
}

impl ObsMatrix {
    fn new(n_states: usize, n_obs: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_states * n_obs {
            return Err(Error::InvalidArgument(format!(
                "emission matrix has {} entries, expected {}",
                data.len(),
                n_states * n_obs
            )));
        }
        Ok(Self {
            n_states,
            n_obs,
            data,
        })
    }

    #[inline]
    fn get(&self, s: usize, o: usize) -> f64 {
        self.data[s * self.n_obs + o]
    }

    fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.n_obs..(s + 1) * self.n_obs]
    }

    fn column(&self, o: usize) -> Vec<f64> {
        (0..self.n_states).map(|s| self.get(s, o)).collect()
    }
}

/// Interval emission bounds Z⁻(o|s) ≤ Z(o|s) ≤ Z⁺(o|s).
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionIntervals {
    lower: ObsMatrix,
    upper: ObsMatrix,
}

impl EmissionIntervals {
    pub fn new(n_states: usize, n_obs: usize, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        Ok(Self {
            lower: ObsMatrix::new(n_states, n_obs, lower)?,
            upper: ObsMatrix::new(n_states, n_obs, upper)?,
        })
    }

    /// Degenerate intervals Z⁻ = Z⁺ = `point`.
    pub fn degenerate(point: &PointEmission) -> Self {
        Self {
            lower: point.probs.clone(),
            upper: point.probs.clone(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.lower.n_states
    }

    pub fn n_obs(&self) -> usize {
        self.lower.n_obs
    }

    #[inline]
    pub fn lower(&self, s: usize, o: usize) -> f64 {
        self.lower.get(s, o)
    }

    #[inline]
    pub fn upper(&self, s: usize, o: usize) -> f64 {
        self.upper.get(s, o)
    }

    pub fn lower_row(&self, s: usize) -> &[f64] {
        self.lower.row(s)
    }

    pub fn upper_row(&self, s: usize) -> &[f64] {
        self.upper.row(s)
    }

    pub fn lower_column(&self, o: usize) -> Vec<f64> {
        self.lower.column(o)
    }

    pub fn upper_column(&self, o: usize) -> Vec<f64> {
        self.upper.column(o)
    }

    /// Whether `z` lies entrywise inside the bounds (with slack `tol`).
    pub fn contains(&self, z: &PointEmission, tol: f64) -> bool {
        z.n_states() == self.n_states()
            && z.n_obs() == self.n_obs()
            && (0..self.n_states()).all(|s| {
                (0..self.n_obs()).all(|o| {
                    let p = z.get(s, o);
                    p >= self.lower(s, o) - tol && p <= self.upper(s, o) + tol
                })
            })
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower == self.upper
    }
}

/// A single row-stochastic perception model Ẑ(o|s). Serialized as a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct PointEmission {
    probs: ObsMatrix,
}

impl From<PointEmission> for Vec<Vec<f64>> {
    fn from(z: PointEmission) -> Self {
        (0..z.n_states()).map(|s| z.row(s).to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for PointEmission {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl PointEmission {
    pub fn new(n_states: usize, n_obs: usize, probs: Vec<f64>) -> Result<Self> {
        Ok(Self {
            probs: ObsMatrix::new(n_states, n_obs, probs)?,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_obs = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_obs) {
            return Err(Error::InvalidArgument("ragged emission rows".into()));
        }
        Self::new(rows.len(), n_obs, rows.concat())
    }

    pub fn n_states(&self) -> usize {
        self.probs.n_states
    }

    pub fn n_obs(&self) -> usize {
        self.probs.n_obs
    }

    #[inline]
    pub fn get(&self, s: usize, o: usize) -> f64 {
        self.probs.get(s, o)
    }

    pub fn row(&self, s: usize) -> &[f64] {
        self.probs.row(s)
    }

    /// Ẑ(o|·) as a vector over states.
    pub fn column(&self, o: usize) -> Vec<f64> {
        self.probs.column(o)
    }

    pub fn is_row_stochastic(&self) -> bool {
        (0..self.n_states()).all(|s| {
            let row = self.row(s);
            row.iter().all(|p| (0.0..=1.0).contains(p))
                && (row.iter().sum::<f64>() - 1.0).abs() <= PROB_TOL
        })
    }
}

/// A probability distribution over states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Belief(Vec<f64>);

impl Belief {
    /// Checked constructor: entries nonnegative and summing to one within [`PROB_TOL`].
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() {
            return Err(Error::InvalidArgument("empty belief".into()));
        }
        if let Some(i) = mass.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "belief entry {i} is {}",
                mass[i]
            )));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidArgument(format!("belief sums to {total}")));
        }
        Ok(Self(mass))
    }

    pub fn point(n_states: usize, s: usize) -> Self {
        let mut mass = vec![0.0; n_states];
        mass[s] = 1.0;
        Self(mass)
    }

    pub fn uniform(n_states: usize) -> Self {
        Self(vec![1.0 / n_states as f64; n_states])
    }

    /// Normalizes nonnegative mass; `None` if the total is not positive.
    pub fn normalized(mut mass: Vec<f64>) -> Option<Self> {
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return None;
        }
        mass.iter_mut().for_each(|p| *p /= total);
        Some(Self(mass))
    }

    pub fn mass(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn support(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s, _)| s)
            .collect()
    }

    /// φ(b) = Σ_s b(s)·chi(s).
    pub fn score(&self, chi: &[f64]) -> f64 {
        self.0.iter().zip(chi).map(|(b, c)| b * c).sum()
    }
}

/// Designated safe subset C and absorbing FAIL states.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SafetyLabels {
    pub safe_core: BTreeSet<usize>,
    pub fail_states: BTreeSet<usize>,
}

impl SafetyLabels {
    pub fn is_disjoint(&self) -> bool {
        self.safe_core.is_disjoint(&self.fail_states)
    }

    pub fn is_fail(&self, s: usize) -> bool {
        self.fail_states.contains(&s)
    }
}

/// The finite interval POMDP bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Ipomdp {
    pub states: SpaceIndex,
    pub actions: SpaceIndex,
    pub observations: SpaceIndex,
    pub transitions: TransitionKernel,
    pub emissions: EmissionIntervals,
    pub point_emission: Option<PointEmission>,
    pub labels: SafetyLabels,
    pub initial_belief: Belief,
    pub horizon: usize,
}

impl Ipomdp {
    pub fn n_states(&self) -> usize {
        self.states.size()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.size()
    }

    pub fn n_obs(&self) -> usize {
        self.observations.size()
    }

    /// The point-estimate kernel, or the renormalized interval midpoint when none was supplied.
    pub fn point_estimate(&self) -> PointEmission {
        if let Some(z) = &self.point_emission {
            return z.clone();
        }
        let (n, m) = (self.n_states(), self.n_obs());
        let mut probs = Vec::with_capacity(n * m);
        for s in 0..n {
            let lo = self.emissions.lower_row(s);
            let hi = self.emissions.upper_row(s);
            probs.extend(crate::simulate::project_to_row(lo, hi, |o| 0.5 * (lo[o] + hi[o])));
        }
        PointEmission::new(n, m, probs).expect("dimensions match")
    }

    /// Errors unless the initial belief is supported inside the safe core.
    pub fn check_initial_support_in_core(&self) -> Result<()> {
        let outside: Vec<usize> = self
            .initial_belief
            .support()
            .into_iter()
            .filter(|s| !self.labels.safe_core.contains(s))
            .collect();
        if outside.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(
                outside
                    .iter()
                    .map(|&s| format!("initial_belief: state '{}' lies outside safe_core", self.states.name(s)))
                    .collect(),
            ))
        }
    }
}

/// Action/observation history (a₀, o₁, …, a_{t−1}, o_t).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<(usize, usize)>,
}

impl History {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, action: usize, observation: usize) {
        self.steps.push((action, observation));
    }

    pub fn validate(&self, model: &Ipomdp) -> Result<()> {
        if self.steps.len() > model.horizon {
            return Err(Error::OutOfRange(format!(
                "history length {} exceeds horizon {}",
                self.steps.len(),
                model.horizon
            )));
        }
        for (i, &(a, o)) in self.steps.iter().enumerate() {
            if a >= model.n_actions() || o >= model.n_obs() {
                return Err(Error::OutOfRange(format!("history step {i}: ({a}, {o})")));
            }
        }
        Ok(())
    }
}

/// Lists every violated invariant; an empty list means the model is well formed.
pub fn validate_model(model: &Ipomdp) -> Vec<String> {
    let mut out = Vec::new();
    let (n, na, no) = (model.n_states(), model.n_actions(), model.n_obs());
    let t = &model.transitions;

    if t.n_states() != n || t.n_actions() != na {
        out.push(format!(
            "transitions: shape ({}, {}) does not match ({n}, {na})",
            t.n_states(),
            t.n_actions()
        ));
    } else {
        for s in 0..n {
            for a in 0..na {
                let row = t.row(s, a);
                if let Some(j) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
                    out.push(format!(
                        "transitions[{}, {}, {}] = {} is outside [0, 1]",
                        model.states.name(s),
                        model.actions.name(a),
                        model.states.name(j),
                        row[j]
                    ));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    out.push(format!(
                        "transitions[{}, {}]: row sums to {sum}",
                        model.states.name(s),
                        model.actions.name(a)
                    ));
                }
            }
        }
    }

    let em = &model.emissions;
    if em.n_states() != n || em.n_obs() != no {
        out.push(format!(
            "emissions: shape ({}, {}) does not match ({n}, {no})",
            em.n_states(),
            em.n_obs()
        ));
    } else {
        for s in 0..n {
            let sname = model.states.name(s);
            for o in 0..no {
                let (lo, hi) = (em.lower(s, o), em.upper(s, o));
                if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                    out.push(format!(
                        "emissions[{sname}, {}]: bounds [{lo}, {hi}] violate 0 <= lower <= upper <= 1",
                        model.observations.name(o)
                    ));
                }
            }
            let lo_sum: f64 = em.lower_row(s).iter().sum();
            let hi_sum: f64 = em.upper_row(s).iter().sum();
            if lo_sum > 1.0 + PROB_TOL || hi_sum < 1.0 - PROB_TOL {
                out.push(format!(
                    "emissions: empty admissible set at state {sname} (sum lower = {lo_sum}, sum upper = {hi_sum})"
                ));
            }
        }
    }

    if let Some(z) = &model.point_emission {
        if z.n_states() != n || z.n_obs() != no {
            out.push("point_emission: shape mismatch".to_string());
        } else {
            for s in 0..n {
                let sum: f64 = z.row(s).iter().sum();
                if (sum - 1.0).abs() > PROB_TOL || z.row(s).iter().any(|p| !(0.0..=1.0).contains(p)) {
                    out.push(format!(
                        "point_emission[{}]: not a distribution (sum {sum})",
                        model.states.name(s)
                    ));
                }
                if em.n_states() == n && em.n_obs() == no {
                    for o in 0..no {
                        let p = z.get(s, o);
                        if p < em.lower(s, o) - PROB_TOL || p > em.upper(s, o) + PROB_TOL {
                            out.push(format!(
                                "point_emission[{}, {}] = {p} lies outside its interval",
                                model.states.name(s),
                                model.observations.name(o)
                            ));
                        }
                    }
                }
            }
        }
    }

    for &s in model.labels.safe_core.iter().chain(&model.labels.fail_states) {
        if s >= n {
            out.push(format!("labels: state index {s} out of range"));
        }
    }
    for s in model.labels.safe_core.intersection(&model.labels.fail_states) {
        out.push(format!(
            "labels: state {} is both safe_core and fail",
            model.states.name(*s)
        ));
    }

    let b0 = model.initial_belief.mass();
    if b0.len() != n {
        out.push(format!("initial_belief: length {} != {n}", b0.len()));
    } else {
        let sum: f64 = b0.iter().sum();
        if b0.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > PROB_TOL {
            out.push(format!("initial_belief: not a distribution (sum {sum})"));
        }
    }
    if model.horizon == 0 {
        out.push("horizon: must be positive".to_string());
    }
    out
}

/// Bayes filter step with an explicit emission column `w[s] = Z(o|s)`.
pub fn bayes_update_with(
    b: &Belief,
    a: usize,
    o: usize,
    transitions: &TransitionKernel,
    w: &[f64],
) -> Result<Belief> {
    let y = transitions.push_forward(b.mass(), a);
    condition_prediction(&y, w).map_err(|evidence| Error::ZeroEvidence {
        action: a,
        observation: o,
        mass: evidence,
    })
}

/// Posterior `y ∘ w / Σ(y ∘ w)` from a predicted belief `y = Tₐᵀb`; the
/// evidence mass is returned as the error when it is not above the zero tolerance.
pub fn condition_prediction(y: &[f64], w: &[f64]) -> std::result::Result<Belief, f64> {
    let u: Vec<f64> = y.iter().zip(w).map(|(y, w)| y * w).collect();
    let evidence: f64 = u.iter().sum();
    if !(evidence > ZERO_EVIDENCE_TOL) {
        return Err(evidence);
    }
    Ok(Belief(u.into_iter().map(|x| x / evidence).collect()))
}

/// Exact posterior b'_s ∝ Z(o|s)·(Tₐᵀb)_s.
pub fn bayes_update(
    b: &Belief,
    a: usize,
    o: usize,
    transitions: &TransitionKernel,
    emission: &PointEmission,
) -> Result<Belief> {
    bayes_update_with(b, a, o, transitions, &emission.column(o))
}

/// The point envelope {b}.
pub fn envelope_from_belief(b: &Belief) -> BeliefEnvelope {
    BeliefEnvelope::point(b)
}
