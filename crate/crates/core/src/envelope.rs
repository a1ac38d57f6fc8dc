//! Conservative one-step propagation of hypercube belief envelopes.
//!
//! The exact posterior of a prior `b` under action `a` and observation `o` is
//! `b'_s = y_s w_s / Σ_j y_j w_j` with `y = Tₐᵀb` and `w_s = Z(o|s)`. Over a
//! box of priors and interval-valued `w` the set of posteriors is not convex,
//! so each facet of the next box is bounded by a linear program:
//!
//! * the products `u_s = y_s w_s` are replaced by their McCormick envelope over
//!   `[yL_s, yU_s] × [Z⁻(o|s), Z⁺(o|s)]`;
//! * the ratio `u_s / Σ u` is linearized with the Charnes–Cooper scaling
//!   `t = 1 / Σ u`, giving variables `(b̃, w̃, ũ, t) = t·(b, w, u, 1)` with
//!   `Σ ũ = 1` and every constant term multiplied by `t`.
//!
//! Every exact posterior is feasible for the relaxation, so the maximum and
//! minimum of each `ũ_s` bound the true posterior set from outside.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linprog::{self, LinearProgram, LpStatus, Relation, Sense};
use crate::model::{Belief, Ipomdp, TransitionKernel, PROB_TOL, ZERO_EVIDENCE_TOL};

/// Outward padding applied to the McCormick box so LP round-off stays sound.
const Y_PAD: f64 = 1e-12;
const NARROW_FACTOR: f64 = 1e-9;

/// Per-state lower/upper bounds intersected with the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefEnvelope {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BeliefEnvelope {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidArgument("envelope bound lengths differ".into()));
        }
        for (s, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "envelope bounds [{lo}, {hi}] at state {s}"
                )));
            }
        }
        let (lo_sum, hi_sum): (f64, f64) = (lower.iter().sum(), upper.iter().sum());
        if lo_sum > 1.0 + PROB_TOL || hi_sum < 1.0 - PROB_TOL {
            return Err(Error::InvalidArgument(format!(
                "envelope misses the simplex (sum lower {lo_sum}, sum upper {hi_sum})"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn point(b: &Belief) -> Self {
        Self {
            lower: b.mass().to_vec(),
            upper: b.mass().to_vec(),
        }
    }

    /// The whole simplex.
    pub fn full(n_states: usize) -> Self {
        Self {
            lower: vec![0.0; n_states],
            upper: vec![1.0; n_states],
        }
    }

    pub fn n_states(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Membership of a belief, with slack `tol` on each bound.
    pub fn contains(&self, b: &[f64], tol: f64) -> bool {
        b.len() == self.n_states()
            && b
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&p, (&lo, &hi))| p >= lo - tol && p <= hi + tol)
    }

    /// Componentwise box inclusion `self ⊆ other` with slack `tol`.
    pub fn is_within(&self, other: &Self, tol: f64) -> bool {
        self.n_states() == other.n_states()
            && (0..self.n_states())
                .all(|s| self.lower[s] >= other.lower[s] - tol && self.upper[s] <= other.upper[s] + tol)
    }

    /// Σ_s (upper − lower): a crude looseness measure.
    pub fn width(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YBoundMode {
    /// Exact extrema of (Tₐᵀb)_s over the envelope, one LP per direction.
    #[default]
    PerCoordinateLp,
    /// `Σ T·lower ≤ y ≤ Σ T·upper`, clipped to [0, 1].
    IntervalArithmetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FacetFailurePolicy {
    /// A facet LP that fails contributes its trivial bound (0 or 1).
    #[default]
    WidenToTrivial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub y_bound_mode: YBoundMode,
    pub zero_evidence_tol: f64,
    pub facet_failure_policy: FacetFailurePolicy,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            y_bound_mode: YBoundMode::PerCoordinateLp,
            zero_evidence_tol: ZERO_EVIDENCE_TOL,
            facet_failure_policy: FacetFailurePolicy::WidenToTrivial,
        }
    }
}

/// `lower ≤ b ≤ upper, Σ b = 1` over all states.
fn box_simplex_program(env: &BeliefEnvelope) -> LinearProgram {
    let n = env.n_states();
    let mut lp = LinearProgram::new(n, Sense::Maximize);
    lp.bounds = env.lower.iter().copied().zip(env.upper.iter().copied()).collect();
    lp.add_constraint(vec![1.0; n], Relation::Eq, 1.0);
    lp
}

/// Sound bounds `yL ≤ Tₐᵀb ≤ yU` for every `b` in the envelope.
pub fn y_bounds(
    env: &BeliefEnvelope,
    transitions: &TransitionKernel,
    a: usize,
    mode: YBoundMode,
) -> Vec<(f64, f64)> {
    let n = env.n_states();
    let column = |next: usize| -> Vec<f64> { (0..n).map(|s| transitions.get(s, a, next)).collect() };
    match mode {
        YBoundMode::IntervalArithmetic => (0..n)
            .map(|next| {
                let col = column(next);
                let lo: f64 = col.iter().zip(&env.lower).map(|(t, l)| t * l).sum();
                let hi: f64 = col.iter().zip(&env.upper).map(|(t, u)| t * u).sum();
                (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0))
            })
            .collect(),
        YBoundMode::PerCoordinateLp => {
            let lp = box_simplex_program(env);
            let mut out = vec![(0.0, 0.0); n];
            let mut dirs = Vec::new();
            let mut objectives = Vec::new();
            for (next, slot) in out.iter_mut().enumerate() {
                let col = column(next);
                if col.iter().zip(&env.upper).all(|(t, u)| *t == 0.0 || *u == 0.0) {
                    continue;
                }
                // fallback if the LP fails: the interval-arithmetic bound
                let lo: f64 = col.iter().zip(&env.lower).map(|(t, l)| t * l).sum();
                let hi: f64 = col.iter().zip(&env.upper).map(|(t, u)| t * u).sum();
                *slot = (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0));
                dirs.push(next);
                objectives.push((col.clone(), Sense::Maximize));
                objectives.push((col, Sense::Minimize));
            }
            if let Ok(results) = linprog::solve_family(&lp, &objectives) {
                for (k, &next) in dirs.iter().enumerate() {
                    if let Ok(sol) = &results[2 * k] {
                        if sol.status == LpStatus::Optimal {
                            out[next].1 = sol.objective.min(out[next].1);
                        }
                    }
                    if let Ok(sol) = &results[2 * k + 1] {
                        if sol.status == LpStatus::Optimal {
                            out[next].0 = sol.objective.max(out[next].0);
                        }
                    }
                }
            }
            out.into_iter()
                .map(|(lo, hi)| {
                    let lo = (lo - Y_PAD).max(0.0);
                    let hi = (hi + Y_PAD).min(1.0);
                    (lo.min(hi), hi)
                })
                .collect()
        }
    }
}

/// Index layout of the lifted facet program.
struct Layout {
    prior: Vec<usize>,
    post: Vec<usize>,
}

impl Layout {
    fn n_vars(&self) -> usize {
        self.prior.len() + 2 * self.post.len() + 1
    }
    fn b(&self, i: usize) -> usize {
        i
    }
    fn w(&self, j: usize) -> usize {
        self.prior.len() + j
    }
    fn u(&self, j: usize) -> usize {
        self.prior.len() + self.post.len() + j
    }
    fn t(&self) -> usize {
        self.prior.len() + 2 * self.post.len()
    }
}

/// Adds rows relaxing `u = y·w` where `y = Σ_i coef_i·b_i`.
/// `scale` is the column multiplying constant terms (t in the scaled program),
/// or `None` for the unscaled program where constants move to the rhs.
///
/// When one factor's interval is narrower than `NARROW_FACTOR` the four
/// McCormick rows are nearly parallel; they are replaced by the two rows
/// `lo·other ≤ u ≤ hi·other`, which are sound for nonnegative factors and
/// lose at most the interval width.
#[allow(clippy::too_many_arguments)]
fn add_mccormick(
    lp: &mut LinearProgram,
    y_terms: &[(usize, f64)],
    w: usize,
    u: usize,
    scale: Option<usize>,
    (y_lo, y_hi): (f64, f64),
    (w_lo, w_hi): (f64, f64),
) {
    if w_hi - w_lo <= NARROW_FACTOR {
        for (k, sign) in [(w_lo, -1.0), (w_hi, 1.0)] {
            // sign·(u − k·y) ≤ 0
            let mut terms: Vec<(usize, f64)> = y_terms.iter().map(|&(i, c)| (i, -sign * k * c)).collect();
            terms.push((u, sign));
            lp.add_sparse(&terms, Relation::Le, 0.0);
        }
        return;
    }
    if y_hi - y_lo <= NARROW_FACTOR {
        lp.add_sparse(&[(w, y_lo), (u, -1.0)], Relation::Le, 0.0);
        lp.add_sparse(&[(u, 1.0), (w, -y_hi)], Relation::Le, 0.0);
        return;
    }
    // rows in the form  α·w + β·y + γ·u + δ·[t] ≤ −δ·[1]
    let rows = [
        (y_lo, w_lo, -1.0, -y_lo * w_lo),
        (y_hi, w_hi, -1.0, -y_hi * w_hi),
        (-y_hi, -w_lo, 1.0, y_hi * w_lo),
        (-y_lo, -w_hi, 1.0, y_lo * w_hi),
    ];
    for (alpha, beta, gamma, delta) in rows {
        let mut terms: Vec<(usize, f64)> = Vec::with_capacity(y_terms.len() + 3);
        terms.push((w, alpha));
        terms.extend(y_terms.iter().map(|&(i, c)| (i, beta * c)));
        terms.push((u, gamma));
        let rhs = match scale {
            Some(t) => {
                terms.push((t, delta));
                0.0
            }
            None => -delta,
        };
        lp.add_sparse(&terms, Relation::Le, rhs);
    }
}

/// Maximum total evidence Σ_s u_s over the unscaled relaxation.
fn max_evidence(
    env: &BeliefEnvelope,
    layout: &Layout,
    y_terms: &[Vec<(usize, f64)>],
    ybox: &[(f64, f64)],
    wbox: &[(f64, f64)],
) -> Option<f64> {
    if layout.post.is_empty() {
        return Some(0.0);
    }
    let nv = layout.prior.len() + 2 * layout.post.len();
    let mut lp = LinearProgram::new(nv, Sense::Maximize);
    for (i, &s) in layout.prior.iter().enumerate() {
        lp.bounds[layout.b(i)] = (env.lower[s], env.upper[s]);
    }
    for (j, &(lo, hi)) in wbox.iter().enumerate() {
        lp.bounds[layout.w(j)] = (lo, hi);
    }
    let sum_b: Vec<(usize, f64)> = (0..layout.prior.len()).map(|i| (layout.b(i), 1.0)).collect();
    lp.add_sparse(&sum_b, Relation::Eq, 1.0);
    for j in 0..layout.post.len() {
        add_mccormick(&mut lp, &y_terms[j], layout.w(j), layout.u(j), None, ybox[j], wbox[j]);
        lp.objective[layout.u(j)] = 1.0;
    }
    match linprog::solve(&lp) {
        Ok(sol) if sol.status == LpStatus::Optimal => Some(sol.objective),
        _ => None,
    }
}

/// Outer box of all one-step posteriors from priors in `env`, for every
/// admissible per-step emission choice, after action `a` and observation `o`.
pub fn propagate(
    env: &BeliefEnvelope,
    a: usize,
    o: usize,
    model: &Ipomdp,
    cfg: &PropagationConfig,
) -> Result<BeliefEnvelope> {
    let n = model.n_states();
    if env.n_states() != n || a >= model.n_actions() || o >= model.n_obs() {
        return Err(Error::OutOfRange(format!("propagate(a = {a}, o = {o}) on {n} states")));
    }
    let t = &model.transitions;
    let ybounds = y_bounds(env, t, a, cfg.y_bound_mode);
    let prior: Vec<usize> = (0..n).filter(|&s| env.upper[s] > 0.0).collect();
    // states that can carry posterior mass
    let post: Vec<usize> = (0..n)
        .filter(|&s| ybounds[s].1 > 0.0 && model.emissions.upper(s, o) > 0.0)
        .filter(|&s| prior.iter().any(|&p| t.get(p, a, s) > 0.0))
        .collect();
    let layout = Layout { prior, post };
    let y_terms: Vec<Vec<(usize, f64)>> = layout
        .post
        .iter()
        .map(|&s| {
            layout
                .prior
                .iter()
                .enumerate()
                .filter_map(|(i, &p)| {
                    let c = t.get(p, a, s);
                    (c != 0.0).then_some((layout.b(i), c))
                })
                .collect()
        })
        .collect();
    let ybox: Vec<(f64, f64)> = layout.post.iter().map(|&s| ybounds[s]).collect();
    let wbox: Vec<(f64, f64)> = layout
        .post
        .iter()
        .map(|&s| (model.emissions.lower(s, o), model.emissions.upper(s, o)))
        .collect();

    let evidence = max_evidence(env, &layout, &y_terms, &ybox, &wbox);
    if let Some(ev) = evidence {
        if ev <= cfg.zero_evidence_tol {
            return Err(Error::InconsistentObservation {
                action: a,
                observation: o,
                max_evidence: ev,
            });
        }
    }

    let mut lp = LinearProgram::new(layout.n_vars(), Sense::Maximize);
    let tc = layout.t();
    for (i, &s) in layout.prior.iter().enumerate() {
        if env.upper[s] < 1.0 {
            lp.add_sparse(&[(layout.b(i), 1.0), (tc, -env.upper[s])], Relation::Le, 0.0);
        }
        if env.lower[s] > 0.0 {
            lp.add_sparse(&[(tc, env.lower[s]), (layout.b(i), -1.0)], Relation::Le, 0.0);
        }
    }
    let mut sum_b: Vec<(usize, f64)> = (0..layout.prior.len()).map(|i| (layout.b(i), 1.0)).collect();
    sum_b.push((tc, -1.0));
    lp.add_sparse(&sum_b, Relation::Eq, 0.0);
    for (j, &(w_lo, w_hi)) in wbox.iter().enumerate() {
        lp.add_sparse(&[(layout.w(j), 1.0), (tc, -w_hi)], Relation::Le, 0.0);
        if w_lo > 0.0 {
            lp.add_sparse(&[(tc, w_lo), (layout.w(j), -1.0)], Relation::Le, 0.0);
        }
        add_mccormick(&mut lp, &y_terms[j], layout.w(j), layout.u(j), Some(tc), ybox[j], wbox[j]);
    }
    let sum_u: Vec<(usize, f64)> = (0..layout.post.len()).map(|j| (layout.u(j), 1.0)).collect();
    lp.add_sparse(&sum_u, Relation::Eq, 1.0);

    let objectives: Vec<(Vec<f64>, Sense)> = (0..layout.post.len())
        .flat_map(|j| {
            let mut c = vec![0.0; layout.n_vars()];
            c[layout.u(j)] = 1.0;
            [(c.clone(), Sense::Maximize), (c, Sense::Minimize)]
        })
        .collect();

    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for &s in &layout.post {
        upper[s] = 1.0;
    }
    let results = match linprog::solve_family(&lp, &objectives) {
        Ok(r) => r,
        Err(_) => return finish(lower, upper),
    };
    for (j, &s) in layout.post.iter().enumerate() {
        if let Ok(sol) = &results[2 * j] {
            if sol.status == LpStatus::Optimal {
                upper[s] = sol.objective;
            }
        }
        if let Ok(sol) = &results[2 * j + 1] {
            if sol.status == LpStatus::Optimal {
                lower[s] = sol.objective;
            }
        }
    }
    finish(lower, upper)
}

/// Clips to [0, 1], enforces lower ≤ upper, and keeps the box on the simplex.
fn finish(mut lower: Vec<f64>, mut upper: Vec<f64>) -> Result<BeliefEnvelope> {
    for (lo, hi) in lower.iter_mut().zip(upper.iter_mut()) {
        *lo = lo.clamp(0.0, 1.0);
        *hi = hi.clamp(0.0, 1.0);
        if *hi < *lo {
            *hi = *lo;
        }
    }
    let hi_sum: f64 = upper.iter().sum();
    if hi_sum < 1.0 {
        // round-off only: the exact posterior set is nonempty
        let deficit = 1.0 - hi_sum;
        let open: Vec<usize> = (0..upper.len()).filter(|&s| upper[s] > 0.0).collect();
        for &s in &open {
            upper[s] = (upper[s] + deficit / open.len() as f64).min(1.0);
        }
    }
    let lo_sum: f64 = lower.iter().sum();
    if lo_sum > 1.0 {
        let excess = lo_sum - 1.0;
        let k = lower.iter().filter(|&&l| l > 0.0).count() as f64;
        lower.iter_mut().for_each(|l| {
            if *l > 0.0 {
                *l = (*l - excess / k).max(0.0)
            }
        });
    }
    BeliefEnvelope::new(lower, upper)
}

/// min Σ_s b(s)·chi(s) over the envelope; 0 if the LP fails.
pub fn min_safety_score(env: &BeliefEnvelope, chi: &[f64]) -> f64 {
    let mut lp = box_simplex_program(env);
    lp.objective = chi.to_vec();
    lp.sense = Sense::Minimize;
    match linprog::solve(&lp) {
        Ok(sol) if sol.status == LpStatus::Optimal => sol.objective.clamp(0.0, 1.0),
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::two_state_identity;
    use crate::model::{bayes_update_with, PointEmission, TransitionKernel};

    fn env(lower: &[f64], upper: &[f64]) -> BeliefEnvelope {
        BeliefEnvelope::new(lower.to_vec(), upper.to_vec()).unwrap()
    }

    #[test]
    fn y_bounds_of_point_envelope_are_the_push_forward() {
        let mut t = TransitionKernel::zeros(2, 1);
        t.row_mut(0, 0).copy_from_slice(&[0.9, 0.1]);
        t.row_mut(1, 0).copy_from_slice(&[0.2, 0.8]);
        let b = Belief::new(vec![0.3, 0.7]).unwrap();
        let y = t.push_forward(b.mass(), 0);
        for (mode, tol) in [(YBoundMode::PerCoordinateLp, 1e-11), (YBoundMode::IntervalArithmetic, 1e-15)] {
            let yb = y_bounds(&BeliefEnvelope::point(&b), &t, 0, mode);
            for (s, &(lo, hi)) in yb.iter().enumerate() {
                assert!((lo - y[s]).abs() < tol && (hi - y[s]).abs() < tol);
            }
        }
    }

    #[test]
    fn y_bounds_identity_with_slack_simplex() {
        let mut t = TransitionKernel::zeros(3, 1);
        for s in 0..3 {
            t.set(s, 0, s, 1.0);
        }
        let e = env(&[0.1, 0.2, 0.3], &[0.3, 0.4, 0.5]);
        let yb = y_bounds(&e, &t, 0, YBoundMode::PerCoordinateLp);
        for s in 0..3 {
            assert!((yb[s].0 - e.lower()[s]).abs() < 1e-11);
            assert!((yb[s].1 - e.upper()[s]).abs() < 1e-11);
        }
    }

    #[test]
    fn y_bounds_over_full_simplex_hit_vertices() {
        let mut t = TransitionKernel::zeros(2, 1);
        t.row_mut(0, 0).copy_from_slice(&[0.9, 0.1]);
        t.row_mut(1, 0).copy_from_slice(&[0.2, 0.8]);
        let yb = y_bounds(&BeliefEnvelope::full(2), &t, 0, YBoundMode::PerCoordinateLp);
        assert!((yb[0].0 - 0.2).abs() < 1e-11 && (yb[0].1 - 0.9).abs() < 1e-11);
    }

    #[test]
    fn degenerate_intervals_reproduce_bayes() {
        let m = two_state_identity([[0.5, 0.5], [0.25, 0.75]], [[0.5, 0.5], [0.25, 0.75]]);
        let b = Belief::uniform(2);
        let out = propagate(&BeliefEnvelope::point(&b), 0, 0, &m, &PropagationConfig::default()).unwrap();
        let exact = bayes_update_with(&b, 0, 0, &m.transitions, &[0.5, 0.25]).unwrap();
        for s in 0..2 {
            assert!((out.lower()[s] - exact.mass()[s]).abs() < 1e-9);
            assert!((out.upper()[s] - exact.mass()[s]).abs() < 1e-9);
        }
    }

    #[test]
    fn prior_box_with_fixed_kernel_matches_closed_form() {
        // b'0 = 0.5 b0 / (0.5 b0 + 0.25 (1 - b0)) = 2 b0 / (1 + b0), b0 ∈ [0.4, 0.6]
        let m = two_state_identity([[0.5, 0.5], [0.25, 0.75]], [[0.5, 0.5], [0.25, 0.75]]);
        let out = propagate(&env(&[0.4, 0.4], &[0.6, 0.6]), 0, 0, &m, &PropagationConfig::default()).unwrap();
        assert!((out.lower()[0] - 4.0 / 7.0).abs() < 1e-7, "{out:?}");
        assert!((out.upper()[0] - 0.75).abs() < 1e-7, "{out:?}");
    }

    #[test]
    fn kernel_interval_with_point_prior_matches_closed_form() {
        let m = two_state_identity([[0.4, 0.4], [0.5, 0.5]], [[0.6, 0.6], [0.5, 0.5]]);
        let out = propagate(&BeliefEnvelope::point(&Belief::uniform(2)), 0, 0, &m, &PropagationConfig::default())
            .unwrap();
        assert!((out.lower()[0] - 0.4 / 0.9).abs() < 1e-7, "{out:?}");
        assert!((out.upper()[0] - 0.6 / 1.1).abs() < 1e-7, "{out:?}");
    }

    #[test]
    fn impossible_observation_is_reported() {
        let m = two_state_identity([[1.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]]);
        let err = propagate(&BeliefEnvelope::full(2), 0, 1, &m, &PropagationConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InconsistentObservation { observation: 1, .. }));
    }

    #[test]
    fn safety_score_examples() {
        let e = env(&[0.3, 0.3], &[0.7, 0.7]);
        assert!((min_safety_score(&e, &[1.0, 1.0]) - 1.0).abs() < 1e-12);
        assert!(min_safety_score(&e, &[0.0, 0.0]).abs() < 1e-12);
        assert!((min_safety_score(&e, &[1.0, 0.0]) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn envelope_rejects_bad_bounds() {
        assert!(BeliefEnvelope::new(vec![0.6, 0.6], vec![0.7, 0.7]).is_err());
        assert!(BeliefEnvelope::new(vec![0.2, 0.1], vec![0.3, 0.3]).is_err());
        assert!(BeliefEnvelope::new(vec![0.5], vec![0.4]).is_err());
    }

    #[test]
    fn interval_arithmetic_mode_is_looser_but_sound() {
        let m = two_state_identity([[0.4, 0.4], [0.5, 0.5]], [[0.6, 0.6], [0.5, 0.5]]);
        let e = env(&[0.3, 0.3], &[0.7, 0.7]);
        let tight = propagate(&e, 0, 0, &m, &PropagationConfig::default()).unwrap();
        let cfg = PropagationConfig {
            y_bound_mode: YBoundMode::IntervalArithmetic,
            ..Default::default()
        };
        let loose = propagate(&e, 0, 0, &m, &cfg).unwrap();
        assert!(tight.is_within(&loose, 1e-9));
        let z = PointEmission::from_rows(&[vec![0.4, 0.6], vec![0.5, 0.5]]).unwrap();
        let post = bayes_update_with(&Belief::new(vec![0.3, 0.7]).unwrap(), 0, 0, &m.transitions, &z.column(0))
            .unwrap();
        assert!(loose.contains(post.mass(), 1e-9));
    }
}
