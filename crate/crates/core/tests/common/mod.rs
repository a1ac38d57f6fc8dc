//! Test-side model builders and independent reference computations.
//!
//! Nothing here calls back into the filtering or envelope code, so the
//! reference posteriors are independent of the implementation under test.

#![allow(dead_code)]

use std::collections::BTreeSet;

use ipshield::model::{Belief, EmissionIntervals, Ipomdp, PointEmission, SafetyLabels, SpaceIndex, TransitionKernel};
use rand::seq::SliceRandom;
use rand::Rng;

/// Random row-stochastic vector of length `n`; with `sparse`, some entries are exactly zero.
pub fn random_distribution<R: Rng>(n: usize, sparse: bool, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n)
            .map(|_| if sparse && rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() })
            .collect();
        let total: f64 = v.iter().sum();
        if total > 1e-3 {
            v.iter_mut().for_each(|x| *x /= total);
            let drift: f64 = 1.0 - v.iter().sum::<f64>();
            let i = v.iter().position(|&x| x > 0.0).unwrap();
            v[i] += drift;
            return v;
        }
    }
}

fn rows_to_kernel(n: usize, na: usize, rows: Vec<Vec<f64>>) -> TransitionKernel {
    TransitionKernel::new(n, na, rows.concat()).unwrap()
}

/// Interval box `[Z* − δ, Z* + δ]` clipped to [0, 1], with δ drawn per entry;
/// roughly one entry in five is degenerate.
pub fn intervals_around<R: Rng>(z: &PointEmission, max_delta: f64, rng: &mut R) -> EmissionIntervals {
    let (n, no) = (z.n_states(), z.n_obs());
    let mut lower = Vec::with_capacity(n * no);
    let mut upper = Vec::with_capacity(n * no);
    for s in 0..n {
        for o in 0..no {
            let p = z.get(s, o);
            let d = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..max_delta) };
            lower.push((p - d).max(0.0));
            upper.push((p + d).min(1.0));
        }
    }
    EmissionIntervals::new(n, no, lower, upper).unwrap()
}

/// Random IPOMDP with `2 ≤ |S| ≤ max_states`, `2 ≤ |O| ≤ max_obs`, 1–3 actions,
/// and the true kernel it was built around.
pub fn random_model<R: Rng>(max_states: usize, max_obs: usize, rng: &mut R) -> (Ipomdp, PointEmission) {
    let n = rng.random_range(2..=max_states);
    let no = rng.random_range(2..=max_obs);
    let na = rng.random_range(1..=3);
    let rows: Vec<Vec<f64>> = (0..n * na).map(|_| random_distribution(n, true, rng)).collect();
    let z_rows: Vec<Vec<f64>> = (0..n).map(|_| random_distribution(no, true, rng)).collect();
    let z = PointEmission::from_rows(&z_rows).unwrap();
    let emissions = intervals_around(&z, 0.3, rng);
    let model = Ipomdp {
        states: SpaceIndex::numbered("s", n).unwrap(),
        actions: SpaceIndex::numbered("a", na).unwrap(),
        observations: SpaceIndex::numbered("o", no).unwrap(),
        transitions: rows_to_kernel(n, na, rows),
        emissions,
        point_emission: Some(z.clone()),
        labels: SafetyLabels {
            safe_core: (0..n).collect(),
            fail_states: BTreeSet::new(),
        },
        initial_belief: Belief::new(random_distribution(n, false, rng)).unwrap(),
        horizon: 5,
    };
    (model, z)
}

/// Two states with identity dynamics under a single action, two observations.
pub fn two_state_identity(lower: [[f64; 2]; 2], upper: [[f64; 2]; 2], b0: [f64; 2]) -> Ipomdp {
    let t = TransitionKernel::new(2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    Ipomdp {
        states: SpaceIndex::numbered("s", 2).unwrap(),
        actions: SpaceIndex::numbered("a", 1).unwrap(),
        observations: SpaceIndex::numbered("o", 2).unwrap(),
        transitions: t,
        emissions: EmissionIntervals::new(2, 2, lower.concat(), upper.concat()).unwrap(),
        point_emission: None,
        labels: SafetyLabels {
            safe_core: [0, 1].into(),
            fail_states: BTreeSet::new(),
        },
        initial_belief: Belief::new(b0.to_vec()).unwrap(),
        horizon: 5,
    }
}

/// Exact posterior `b′ ∝ (Tₐᵀb) ∘ w`, or `None` when the evidence is zero.
pub fn exact_posterior(model: &Ipomdp, b: &[f64], a: usize, w: &[f64]) -> Option<Vec<f64>> {
    let n = model.n_states();
    let mut u = vec![0.0; n];
    for (next, u_next) in u.iter_mut().enumerate() {
        let y: f64 = (0..n).map(|s| b[s] * model.transitions.get(s, a, next)).sum();
        *u_next = y * w[next];
    }
    let evidence: f64 = u.iter().sum();
    if evidence <= 1e-12 {
        return None;
    }
    Some(u.into_iter().map(|x| x / evidence).collect())
}

/// A random admissible emission row for state `s`: starts at the lower bounds
/// and spends the remaining mass in random order, sometimes greedily so that
/// vertices of the admissible set are hit.
pub fn admissible_row<R: Rng>(model: &Ipomdp, s: usize, rng: &mut R) -> Vec<f64> {
    let (lo, hi) = (model.emissions.lower_row(s), model.emissions.upper_row(s));
    let mut w = lo.to_vec();
    let mut left = 1.0 - lo.iter().sum::<f64>();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.shuffle(rng);
    let greedy = rng.random_bool(0.5);
    for &o in &order {
        let room = (hi[o] - w[o]).min(left);
        let add = if greedy { room } else { room * rng.random::<f64>() };
        w[o] += add;
        left -= add;
    }
    for &o in &order {
        let add = (hi[o] - w[o]).min(left).max(0.0);
        w[o] += add;
        left -= add;
    }
    w
}

/// Observation-`o` column of a freshly drawn admissible kernel.
pub fn admissible_column<R: Rng>(model: &Ipomdp, o: usize, rng: &mut R) -> Vec<f64> {
    (0..model.n_states()).map(|s| admissible_row(model, s, rng)[o]).collect()
}

pub fn sample_index<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let mut x = rng.random::<f64>() * p.iter().sum::<f64>();
    for (i, &q) in p.iter().enumerate() {
        if x < q {
            return i;
        }
        x -= q;
    }
    p.iter().rposition(|&q| q > 0.0).unwrap()
}

/// Exact binomial upper tail P(X ≥ k), X ~ Bin(n, p), by summing log-space terms.
pub fn binomial_tail_ge(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let ln_choose = |j: u64| -> f64 { (1..=j).map(|i| ((n - j + i) as f64 / i as f64).ln()).sum() };
    (k..=n)
        .map(|j| (ln_choose(j) + j as f64 * p.ln() + (n - j) as f64 * (1.0 - p).ln()).exp())
        .sum::<f64>()
        .min(1.0)
}

/// Clopper–Pearson bounds by bisection on the binomial tails:
/// lo solves P(X ≥ k; lo) = α/2 and hi solves P(X ≤ k; hi) = α/2.
pub fn clopper_pearson_by_tails(k: u64, n: u64, alpha: f64) -> (f64, f64) {
    let solve = |f: &dyn Fn(f64) -> f64| {
        // f is increasing in p on [0, 1]; find f(p) = 0.
        let (mut a, mut b) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if f(m) < 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    let lo = if k == 0 { 0.0 } else { solve(&|p| binomial_tail_ge(k, n, p) - alpha / 2.0) };
    let hi = if k == n {
        1.0
    } else {
        solve(&|p| alpha / 2.0 - (1.0 - binomial_tail_ge(k + 1, n, p)))
    };
    (lo, hi)
}

/// [`random_model`] with between one and ⌊n/2⌋ states relabelled FAIL, the
/// rest forming the safe core, and an initial belief on the core.
pub fn random_labeled_model<R: Rng>(max_states: usize, max_obs: usize, rng: &mut R) -> (Ipomdp, PointEmission) {
    let (mut m, z) = random_model(max_states, max_obs, rng);
    let n = m.n_states();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_fail = rng.random_range(1..=(n / 2).max(1));
    let fail: BTreeSet<usize> = order[..n_fail].iter().copied().collect();
    let mut b0 = random_distribution(n, false, rng);
    for &s in &fail {
        b0[s] = 0.0;
    }
    m.initial_belief = Belief::normalized(b0).unwrap();
    m.labels = SafetyLabels {
        safe_core: (0..n).filter(|s| !fail.contains(s)).collect(),
        fail_states: fail,
    };
    (m, z)
}

/// Model with point intervals on `z`, FAIL states as given and the core as the rest.
pub fn exact_model(t: TransitionKernel, z: PointEmission, fail: &[usize], b0: Vec<f64>) -> Ipomdp {
    let (n, na, no) = (t.n_states(), t.n_actions(), z.n_obs());
    let fail_states: BTreeSet<usize> = fail.iter().copied().collect();
    Ipomdp {
        states: SpaceIndex::numbered("s", n).unwrap(),
        actions: SpaceIndex::numbered("a", na).unwrap(),
        observations: SpaceIndex::numbered("o", no).unwrap(),
        transitions: t,
        emissions: EmissionIntervals::degenerate(&z),
        point_emission: Some(z),
        labels: SafetyLabels {
            safe_core: (0..n).filter(|s| !fail_states.contains(s)).collect(),
            fail_states,
        },
        initial_belief: Belief::new(b0).unwrap(),
        horizon: 5,
    }
}

/// s0 under `stay` remains with probability 0.95 and otherwise fails; `jump` always fails.
pub fn chain_fixture() -> Ipomdp {
    let mut t = TransitionKernel::zeros(2, 2);
    t.row_mut(0, 0).copy_from_slice(&[0.95, 0.05]);
    t.set(0, 1, 1, 1.0);
    t.set(1, 0, 1, 1.0);
    t.set(1, 1, 1, 1.0);
    let z = PointEmission::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    exact_model(t, z, &[1], vec![1.0, 0.0])
}

/// Two safe states that one observation cannot tell apart, each with a
/// different action that leads to FAIL: no support strategy survives.
pub fn aliased_fixture() -> Ipomdp {
    let mut t = TransitionKernel::zeros(3, 2);
    t.set(0, 0, 0, 1.0);
    t.set(1, 0, 2, 1.0);
    t.set(0, 1, 2, 1.0);
    t.set(1, 1, 1, 1.0);
    t.set(2, 0, 2, 1.0);
    t.set(2, 1, 2, 1.0);
    let z = PointEmission::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
    exact_model(t, z, &[2], vec![0.5, 0.5, 0.0])
}

/// Support game solved by brute force over bitmasks: reachable supports by
/// BFS, losing supports as the attractor of those containing FAIL.
pub struct SupportOracle {
    pub initial: u32,
    pub reachable: BTreeSet<u32>,
    losing: BTreeSet<u32>,
    succ: Vec<Vec<Vec<u32>>>,
}

impl SupportOracle {
    pub fn solve(model: &Ipomdp, zhat: &PointEmission) -> Self {
        let n = model.n_states();
        assert!(n <= 16);
        let (na, no) = (model.n_actions(), model.n_obs());
        let masks = 1u32 << n;
        let succ: Vec<Vec<Vec<u32>>> = (0..masks)
            .map(|u| {
                (0..na)
                    .map(|a| {
                        (0..no)
                            .map(|o| {
                                let mut v = 0u32;
                                for s in (0..n).filter(|s| u >> s & 1 == 1) {
                                    for next in 0..n {
                                        if model.transitions.get(s, a, next) > 0.0 && zhat.get(next, o) > 1e-12 {
                                            v |= 1 << next;
                                        }
                                    }
                                }
                                v
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let initial = model.initial_belief.support().iter().fold(0u32, |m, &s| m | 1 << s);
        let mut reachable = BTreeSet::from([initial]);
        let mut frontier = vec![initial];
        while let Some(u) = frontier.pop() {
            for v in succ[u as usize].iter().flatten() {
                if *v != 0 && reachable.insert(*v) {
                    frontier.push(*v);
                }
            }
        }
        let fail_mask = model.labels.fail_states.iter().fold(0u32, |m, &s| m | 1 << s);
        let mut losing: BTreeSet<u32> = (1..masks).filter(|u| u & fail_mask != 0).collect();
        loop {
            let grow: Vec<u32> = (1..masks)
                .filter(|u| !losing.contains(u))
                .filter(|&u| {
                    succ[u as usize]
                        .iter()
                        .all(|per_o| per_o.iter().any(|&v| v != 0 && losing.contains(&v)))
                })
                .collect();
            if grow.is_empty() {
                break;
            }
            losing.extend(grow);
        }
        Self {
            initial,
            reachable,
            losing,
            succ,
        }
    }

    pub fn is_winning(&self, u: u32) -> bool {
        u != 0 && !self.losing.contains(&u)
    }

    /// Actions after which no nonempty successor support is losing.
    pub fn witnesses(&self, u: u32) -> BTreeSet<usize> {
        if !self.is_winning(u) {
            return BTreeSet::new();
        }
        self.succ[u as usize]
            .iter()
            .enumerate()
            .filter(|(_, per_o)| per_o.iter().all(|&v| v == 0 || !self.losing.contains(&v)))
            .map(|(a, _)| a)
            .collect()
    }
}

pub fn mask_of(states: &[usize]) -> u32 {
    states.iter().fold(0u32, |m, &s| m | 1 << s)
}
