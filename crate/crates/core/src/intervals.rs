//! Emission interval construction from labeled counts.
//!
//! Each entry Z(o|s) gets an exact equal-tail Clopper–Pearson interval at its
//! own level α_{s,o}; the per-entry levels are combined into the dataset-level
//! confidence λ by a union bound or, under independence, by a product.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::model::{EmissionIntervals, PointEmission};

/// Absolute tolerance of the Beta quantile bisection.
pub const QUANTILE_TOL: f64 = 1e-10;

/// Per-state sample counts `n[s]` and per-(state, observation) counts `k[s][o]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountsTable {
    n: Vec<u64>,
    k: Vec<Vec<u64>>,
}

impl CountsTable {
    pub fn new(k: Vec<Vec<u64>>) -> Result<Self> {
        let n_obs = k.first().map_or(0, Vec::len);
        if k.is_empty() || n_obs == 0 {
            return Err(Error::InvalidCounts("empty counts table".into()));
        }
        if k.iter().any(|row| row.len() != n_obs) {
            return Err(Error::InvalidCounts("ragged counts table".into()));
        }
        let n = k.iter().map(|row| row.iter().sum()).collect();
        Ok(Self { n, k })
    }

    /// Builds from explicit totals, checking Σ_o k[s][o] = n[s].
    pub fn with_totals(n: Vec<u64>, k: Vec<Vec<u64>>) -> Result<Self> {
        let table = Self::new(k)?;
        if table.n.len() != n.len() {
            return Err(Error::InvalidCounts(format!(
                "{} totals for {} states",
                n.len(),
                table.n.len()
            )));
        }
        for (s, (&have, &want)) in table.n.iter().zip(&n).enumerate() {
            if have != want {
                return Err(Error::InvalidCounts(format!(
                    "state {s}: observation counts sum to {have}, n_s = {want}"
                )));
            }
        }
        Ok(table)
    }

    pub fn n_states(&self) -> usize {
        self.n.len()
    }

    pub fn n_obs(&self) -> usize {
        self.k[0].len()
    }

    pub fn n(&self, s: usize) -> u64 {
        self.n[s]
    }

    pub fn k(&self, s: usize, o: usize) -> u64 {
        self.k[s][o]
    }

    pub fn totals(&self) -> &[u64] {
        &self.n
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// α_{s,o} = α / (|S|·|O|).
    Uniform,
    /// Explicit row-major α_{s,o}.
    PerEntry(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    UnionBound,
    IndependenceProduct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaBudget {
    pub alpha_total: f64,
    pub allocation: Allocation,
    pub combiner: Combiner,
}

impl AlphaBudget {
    pub fn uniform(alpha_total: f64) -> Self {
        Self {
            alpha_total,
            allocation: Allocation::Uniform,
            combiner: Combiner::UnionBound,
        }
    }

    /// Resolves the per-entry levels for an `n_states × n_obs` table.
    pub fn entry_alphas(&self, n_states: usize, n_obs: usize) -> Result<Vec<f64>> {
        if !(self.alpha_total > 0.0 && self.alpha_total < 1.0) {
            return Err(Error::InvalidBudget(format!(
                "alpha = {} is not in (0, 1)",
                self.alpha_total
            )));
        }
        let m = n_states * n_obs;
        let alphas = match &self.allocation {
            Allocation::Uniform => vec![self.alpha_total / m as f64; m],
            Allocation::PerEntry(a) => {
                if a.len() != m {
                    return Err(Error::InvalidBudget(format!(
                        "{} per-entry levels for {m} entries",
                        a.len()
                    )));
                }
                a.clone()
            }
        };
        if let Some(bad) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::InvalidBudget(format!("entry level {bad} is not in (0, 1)")));
        }
        let slack = 1e-12;
        match self.combiner {
            Combiner::UnionBound => {
                let total: f64 = alphas.iter().sum();
                if total > self.alpha_total + slack {
                    return Err(Error::InvalidBudget(format!(
                        "entry levels sum to {total} > alpha = {}",
                        self.alpha_total
                    )));
                }
            }
            Combiner::IndependenceProduct => {
                let miss = 1.0 - alphas.iter().map(|a| 1.0 - a).product::<f64>();
                if miss > self.alpha_total + slack {
                    return Err(Error::InvalidBudget(format!(
                        "independent entry levels give 1 - lambda = {miss} > alpha = {}",
                        self.alpha_total
                    )));
                }
            }
        }
        Ok(alphas)
    }

    pub fn lambda(&self, entry_alphas: &[f64]) -> f64 {
        match self.combiner {
            Combiner::UnionBound => 1.0 - entry_alphas.iter().sum::<f64>(),
            Combiner::IndependenceProduct => entry_alphas.iter().map(|a| 1.0 - a).product(),
        }
    }
}

/// Learned intervals with their dataset-level confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalEstimate {
    pub intervals: EmissionIntervals,
    pub lambda: f64,
    /// States with no samples; their rows are vacuous `[0, 1]`.
    pub vacuous_states: Vec<usize>,
}

/// q-quantile of Beta(a, b) by bisection on the regularized incomplete beta.
fn beta_quantile(q: f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > QUANTILE_TOL * 0.01 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact equal-tail binomial interval for k successes out of n at level `alpha`.
pub fn clopper_pearson(k: u64, n: u64, alpha: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return Err(Error::InvalidCounts(format!("k = {k}, n = {n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidBudget(format!("alpha = {alpha} is not in (0, 1)")));
    }
    let (kf, nf) = (k as f64, n as f64);
    let lo = if k == 0 {
        0.0
    } else {
        beta_quantile(alpha / 2.0, kf, nf - kf + 1.0)
    };
    let hi = if k == n {
        1.0
    } else {
        beta_quantile(1.0 - alpha / 2.0, kf + 1.0, nf - kf)
    };
    // bisection leaves ~1e-12 of slack; keep the MLE inside
    let mle = kf / nf;
    Ok((lo.min(mle), hi.max(mle)))
}

pub fn build_emission_intervals(counts: &CountsTable, budget: &AlphaBudget) -> Result<IntervalEstimate> {
    let (ns, no) = (counts.n_states(), counts.n_obs());
    let alphas = budget.entry_alphas(ns, no)?;
    let mut lower = Vec::with_capacity(ns * no);
    let mut upper = Vec::with_capacity(ns * no);
    let mut vacuous_states = Vec::new();
    for s in 0..ns {
        let n = counts.n(s);
        if n == 0 {
            vacuous_states.push(s);
            lower.extend(std::iter::repeat_n(0.0, no));
            upper.extend(std::iter::repeat_n(1.0, no));
            continue;
        }
        for o in 0..no {
            let (lo, hi) = clopper_pearson(counts.k(s, o), n, alphas[s * no + o])?;
            lower.push(lo);
            upper.push(hi);
        }
    }
    Ok(IntervalEstimate {
        intervals: EmissionIntervals::new(ns, no, lower, upper)?,
        lambda: budget.lambda(&alphas),
        vacuous_states,
    })
}

/// Empirical frequencies Ẑ(o|s) = k[s][o] / n[s].
pub fn point_estimate(counts: &CountsTable) -> Result<PointEmission> {
    let (ns, no) = (counts.n_states(), counts.n_obs());
    let mut probs = Vec::with_capacity(ns * no);
    for s in 0..ns {
        let n = counts.n(s);
        if n == 0 {
            return Err(Error::InvalidCounts(format!("state {s} has no samples")));
        }
        probs.extend((0..no).map(|o| counts.k(s, o) as f64 / n as f64));
    }
    PointEmission::new(ns, no, probs)
}
