//! Dense linear programs and a deterministic two-phase simplex solver.
//!
//! Problems are converted to standard form (nonnegative columns, `rhs ≥ 0`
//! rows) and scaled by geometric-mean row and column factors. Entering
//! columns follow Dantzig's rule with lowest-index tie-breaking; after a run
//! of degenerate pivots the solver switches to Bland's rule for the rest of
//! the solve, which rules out cycling. Pivots small relative to their column
//! are rejected. The tableau is rebuilt from the original rows every few
//! dozen pivots and before any terminal verdict, and round-off infeasibility
//! left by a rebuild is removed with dual simplex pivots. Identical inputs
//! give bit-identical outputs.
//!
//! [`solve_family`] shares one phase-1 basis across several objectives over
//! the same feasible region, which is how the envelope facets are computed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEAS_TOL: f64 = 1e-9;
pub const OPT_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
/// Pivots smaller than this fraction of the column's largest entry are noise.
const REL_PIVOT_TOL: f64 = 1e-7;
const RATIO_TIE_TOL: f64 = 1e-12;
const REINVERT_EVERY: usize = 40;
const SCALING_PASSES: usize = 4;
const REINVERT_PIVOT_TOL: f64 = 1e-12;
const DEGENERATE_RUN_BEFORE_BLAND: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub num_vars: usize,
    /// Per-variable `[lb, ub]`; infinities allowed.
    pub bounds: Vec<(f64, f64)>,
    pub constraints: Vec<Constraint>,
    pub objective: Vec<f64>,
    pub sense: Sense,
}

impl LinearProgram {
    /// `num_vars` nonnegative variables, no constraints, zero objective.
    pub fn new(num_vars: usize, sense: Sense) -> Self {
        Self {
            num_vars,
            bounds: vec![(0.0, f64::INFINITY); num_vars],
            constraints: Vec::new(),
            objective: vec![0.0; num_vars],
            sense,
        }
    }

    pub fn add_constraint(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint {
            coeffs,
            relation,
            rhs,
        });
    }

    /// Adds Σ coef·x over the given sparse terms.
    pub fn add_sparse(&mut self, terms: &[(usize, f64)], relation: Relation, rhs: f64) {
        let mut coeffs = vec![0.0; self.num_vars];
        for &(j, c) in terms {
            coeffs[j] += c;
        }
        self.add_constraint(coeffs, relation, rhs);
    }

    pub fn check(&self) -> Result<()> {
        if self.num_vars == 0 {
            return Err(Error::MalformedProgram("no variables".into()));
        }
        if self.bounds.len() != self.num_vars || self.objective.len() != self.num_vars {
            return Err(Error::MalformedProgram("bounds/objective length mismatch".into()));
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if c.coeffs.len() != self.num_vars {
                return Err(Error::MalformedProgram(format!(
                    "constraint {i} has {} coefficients",
                    c.coeffs.len()
                )));
            }
            if !c.rhs.is_finite() || c.coeffs.iter().any(|a| !a.is_finite()) {
                return Err(Error::MalformedProgram(format!("constraint {i} is not finite")));
            }
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(Error::MalformedProgram("objective is not finite".into()));
        }
        for (j, &(lb, ub)) in self.bounds.iter().enumerate() {
            if lb.is_nan() || ub.is_nan() || lb == f64::INFINITY || ub == f64::NEG_INFINITY {
                return Err(Error::MalformedProgram(format!("variable {j} has bounds [{lb}, {ub}]")));
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    /// Largest bound or constraint violation of `x`, scaled per row by its magnitude.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (&(lb, ub), &v) in self.bounds.iter().zip(x) {
            worst = worst.max(lb - v).max(v - ub);
        }
        for c in &self.constraints {
            let lhs: f64 = c.coeffs.iter().zip(x).map(|(a, x)| a * x).sum();
            let scale = 1.0
                + c.rhs.abs()
                + c.coeffs.iter().zip(x).map(|(a, x)| (a * x).abs()).sum::<f64>();
            let v = match c.relation {
                Relation::Le => lhs - c.rhs,
                Relation::Ge => c.rhs - lhs,
                Relation::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(v / scale);
        }
        worst
    }

    /// CPLEX LP-format text, for cross-checking with external solvers.
    pub fn to_lp_text(&self) -> String {
        fn terms(coeffs: &[f64]) -> String {
            let parts: Vec<String> = coeffs
                .iter()
                .enumerate()
                .filter(|(_, c)| **c != 0.0)
                .map(|(j, c)| format!("{} {c} x{j}", if *c < 0.0 { "-" } else { "+" }).replace("- -", "- "))
                .collect();
            if parts.is_empty() {
                "0 x0".into()
            } else {
                parts.join(" ")
            }
        }
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}",
            match self.sense {
                Sense::Maximize => "Maximize",
                Sense::Minimize => "Minimize",
            }
        );
        let _ = writeln!(out, " obj: {}", terms(&self.objective));
        let _ = writeln!(out, "Subject To");
        for (i, c) in self.constraints.iter().enumerate() {
            let rel = match c.relation {
                Relation::Le => "<=",
                Relation::Eq => "=",
                Relation::Ge => ">=",
            };
            let _ = writeln!(out, " c{i}: {} {rel} {}", terms(&c.coeffs), c.rhs);
        }
        let _ = writeln!(out, "Bounds");
        for (j, &(lb, ub)) in self.bounds.iter().enumerate() {
            match (lb.is_finite(), ub.is_finite()) {
                (false, false) => {
                    let _ = writeln!(out, " x{j} free");
                }
                (true, true) => {
                    let _ = writeln!(out, " {lb} <= x{j} <= {ub}");
                }
                (true, false) => {
                    let _ = writeln!(out, " x{j} >= {lb}");
                }
                (false, true) => {
                    let _ = writeln!(out, " -inf <= x{j} <= {ub}");
                }
            }
        }
        out.push_str("End\n");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Objective value in the caller's sense; NaN unless optimal.
    pub objective: f64,
    /// Primal point; empty unless optimal.
    pub x: Vec<f64>,
}

impl LpSolution {
    fn without_point(status: LpStatus) -> Self {
        Self {
            status,
            objective: f64::NAN,
            x: Vec::new(),
        }
    }
}

/// Seam for substituting another solver behind the same contract.
pub trait LpBackend {
    fn solve(&self, lp: &LinearProgram) -> Result<LpSolution>;

    /// Solves one program per objective over the feasible region of `lp`.
    fn solve_family(&self, lp: &LinearProgram, objectives: &[(Vec<f64>, Sense)]) -> Result<Vec<Result<LpSolution>>> {
        Ok(objectives
            .iter()
            .map(|(c, sense)| {
                let mut p = lp.clone();
                p.objective = c.clone();
                p.sense = *sense;
                self.solve(&p)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PivotRule {
    /// Most negative reduced cost, Bland's rule after a degenerate stall.
    #[default]
    DantzigThenBland,
    /// Lowest-index improving column throughout.
    Bland,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DenseSimplex {
    pub rule: PivotRule,
}

impl LpBackend for DenseSimplex {
    fn solve(&self, lp: &LinearProgram) -> Result<LpSolution> {
        let mut v = self.solve_family(lp, &[(lp.objective.clone(), lp.sense)])?;
        v.pop().expect("one objective")
    }

    fn solve_family(&self, lp: &LinearProgram, objectives: &[(Vec<f64>, Sense)]) -> Result<Vec<Result<LpSolution>>> {
        lp.check()?;
        for (c, _) in objectives {
            if c.len() != lp.num_vars || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::MalformedProgram("bad objective vector".into()));
            }
        }
        let cap = 50 * (lp.num_vars + lp.constraints.len()).max(1);
        let std = match StandardForm::build(lp) {
            Some(s) => s,
            None => {
                return Ok(objectives
                    .iter()
                    .map(|_| Ok(LpSolution::without_point(LpStatus::Infeasible)))
                    .collect())
            }
        };
        let fresh = || -> Result<Option<Tableau>> {
            let mut tab = Tableau::new(&std, self.rule);
            Ok(match tab.phase_one(cap)? {
                PhaseOne::Infeasible => None,
                PhaseOne::Feasible => Some(tab),
            })
        };
        let Some(mut tab) = fresh()? else {
            return Ok(objectives
                .iter()
                .map(|_| Ok(LpSolution::without_point(LpStatus::Infeasible)))
                .collect());
        };
        let mut out = Vec::with_capacity(objectives.len());
        for (c, sense) in objectives {
            let sign = match sense {
                Sense::Maximize => 1.0,
                Sense::Minimize => -1.0,
            };
            let std_cost = std.transform_objective(c, sign);
            let mut res = optimize(&mut tab, &std, lp, c, &std_cost, cap);
            if res.is_err() {
                // the shared basis may be damaged: restart from phase 1 and retry once
                match fresh() {
                    Ok(Some(t)) => {
                        tab = t;
                        res = optimize(&mut tab, &std, lp, c, &std_cost, cap);
                        if res.is_err() {
                            if let Ok(Some(t)) = fresh() {
                                tab = t;
                            }
                        }
                    }
                    Ok(None) => res = Err(Error::NumericalFailure("phase 1 disagrees on restart".into())),
                    Err(e) => res = Err(e),
                }
            }
            out.push(res);
        }
        Ok(out)
    }
}

/// Phase 2 from the current basis, with the post-solve feasibility check.
fn optimize(
    tab: &mut Tableau,
    std: &StandardForm,
    lp: &LinearProgram,
    c: &[f64],
    std_cost: &[f64],
    cap: usize,
) -> Result<LpSolution> {
    match tab.phase_two(std_cost, cap)? {
        LpStatus::Optimal => {
            let x = std.recover(&tab.primal());
            let viol = lp.max_violation(&x);
            if viol > 1e-8 {
                return Err(Error::NumericalFailure(format!(
                    "solution violates constraints by {viol:e}"
                )));
            }
            let objective = c.iter().zip(&x).map(|(c, x)| c * x).sum();
            Ok(LpSolution {
                status: LpStatus::Optimal,
                objective,
                x,
            })
        }
        other => Ok(LpSolution::without_point(other)),
    }
}

/// Solves with the default dense simplex.
pub fn solve(lp: &LinearProgram) -> Result<LpSolution> {
    DenseSimplex::default().solve(lp)
}

/// Solves each objective over the feasible region of `lp`, reusing the phase-1 basis.
pub fn solve_family(lp: &LinearProgram, objectives: &[(Vec<f64>, Sense)]) -> Result<Vec<Result<LpSolution>>> {
    DenseSimplex::default().solve_family(lp, objectives)
}

/// How an original variable maps onto standard-form columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// x = offset + col
    Shifted { col: usize, offset: f64 },
    /// x = offset − col
    Mirrored { col: usize, offset: f64 },
    /// x = pos − neg
    Free { pos: usize, neg: usize },
}

struct StdRow {
    coeffs: Vec<f64>,
    relation: Relation,
    rhs: f64,
}

struct StandardForm {
    n_orig: usize,
    n_cols: usize,
    maps: Vec<VarMap>,
    rows: Vec<StdRow>,
    /// Standard column `k` holds `col_scale[k]⁻¹` times the unscaled column value.
    col_scale: Vec<f64>,
}

impl StandardForm {
    /// `None` when some variable has an empty bound interval.
    fn build(lp: &LinearProgram) -> Option<Self> {
        let mut maps = Vec::with_capacity(lp.num_vars);
        let mut n_cols = 0;
        let mut bound_rows: Vec<(usize, f64)> = Vec::new();
        for &(lb, ub) in &lp.bounds {
            if lb > ub {
                return None;
            }
            let m = match (lb.is_finite(), ub.is_finite()) {
                (true, _) => {
                    let col = n_cols;
                    n_cols += 1;
                    if ub.is_finite() {
                        bound_rows.push((col, ub - lb));
                    }
                    VarMap::Shifted { col, offset: lb }
                }
                (false, true) => {
                    let col = n_cols;
                    n_cols += 1;
                    VarMap::Mirrored { col, offset: ub }
                }
                (false, false) => {
                    let (pos, neg) = (n_cols, n_cols + 1);
                    n_cols += 2;
                    VarMap::Free { pos, neg }
                }
            };
            maps.push(m);
        }
        let mut rows = Vec::with_capacity(lp.constraints.len() + bound_rows.len());
        for c in &lp.constraints {
            let mut coeffs = vec![0.0; n_cols];
            let mut rhs = c.rhs;
            for (j, &a) in c.coeffs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                match maps[j] {
                    VarMap::Shifted { col, offset } => {
                        coeffs[col] += a;
                        rhs -= a * offset;
                    }
                    VarMap::Mirrored { col, offset } => {
                        coeffs[col] -= a;
                        rhs -= a * offset;
                    }
                    VarMap::Free { pos, neg } => {
                        coeffs[pos] += a;
                        coeffs[neg] -= a;
                    }
                }
            }
            rows.push(StdRow {
                coeffs,
                relation: c.relation,
                rhs,
            });
        }
        for (col, width) in bound_rows {
            let mut coeffs = vec![0.0; n_cols];
            coeffs[col] = 1.0;
            rows.push(StdRow {
                coeffs,
                relation: Relation::Le,
                rhs: width,
            });
        }
        // rhs ≥ 0
        for r in &mut rows {
            if r.rhs < 0.0 {
                r.rhs = -r.rhs;
                r.coeffs.iter_mut().for_each(|a| *a = -*a);
                r.relation = match r.relation {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
            }
        }
        let col_scale = equilibrate(&mut rows, n_cols);
        Some(Self {
            n_orig: lp.num_vars,
            n_cols,
            maps,
            rows,
            col_scale,
        })
    }

    /// Maximization costs over standard columns for `sign · c`.
    fn transform_objective(&self, c: &[f64], sign: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for (j, &cj) in c.iter().enumerate() {
            let cj = sign * cj;
            match self.maps[j] {
                VarMap::Shifted { col, .. } => out[col] += cj,
                VarMap::Mirrored { col, .. } => out[col] -= cj,
                VarMap::Free { pos, neg } => {
                    out[pos] += cj;
                    out[neg] -= cj;
                }
            }
        }
        out.iter_mut().zip(&self.col_scale).for_each(|(c, s)| *c *= s);
        out
    }

    fn recover(&self, cols: &[f64]) -> Vec<f64> {
        let cols: Vec<f64> = cols.iter().zip(&self.col_scale).map(|(x, s)| x * s).collect();
        (0..self.n_orig)
            .map(|j| match self.maps[j] {
                VarMap::Shifted { col, offset } => offset + cols[col],
                VarMap::Mirrored { col, offset } => offset - cols[col],
                VarMap::Free { pos, neg } => cols[pos] - cols[neg],
            })
            .collect()
    }
}

/// Geometric-mean row and column scaling followed by row equilibration to a
/// unit largest entry. Returns the column scale factors.
fn equilibrate(rows: &mut [StdRow], n_cols: usize) -> Vec<f64> {
    let mut col_scale = vec![1.0; n_cols];
    let geo = |lo: f64, hi: f64| if hi > 0.0 { 1.0 / (lo * hi).sqrt() } else { 1.0 };
    for _ in 0..SCALING_PASSES {
        for r in rows.iter_mut() {
            let (lo, hi) = nonzero_range(r.coeffs.iter().copied());
            let f = geo(lo, hi);
            r.coeffs.iter_mut().for_each(|a| *a *= f);
            r.rhs *= f;
        }
        for (k, cs) in col_scale.iter_mut().enumerate() {
            let (lo, hi) = nonzero_range(rows.iter().map(|r| r.coeffs[k]));
            let f = geo(lo, hi);
            rows.iter_mut().for_each(|r| r.coeffs[k] *= f);
            *cs *= f;
        }
    }
    for r in rows.iter_mut() {
        let (_, hi) = nonzero_range(r.coeffs.iter().copied());
        if hi > 0.0 {
            r.coeffs.iter_mut().for_each(|a| *a /= hi);
            r.rhs /= hi;
        }
    }
    col_scale
}

/// Smallest and largest nonzero magnitude; `(∞, 0)` when all entries are zero.
fn nonzero_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|a| *a != 0.0)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), a| (lo.min(a.abs()), hi.max(a.abs())))
}

enum PhaseOne {
    Feasible,
    Infeasible,
}

/// Dense simplex tableau. Row `m` is the objective row holding reduced costs
/// `d_j` (entering when `d_j < 0`) and the current objective value in its rhs.
struct Tableau {
    m: usize,
    width: usize,
    n_struct: usize,
    /// Total columns excluding rhs.
    n_cols: usize,
    data: Vec<f64>,
    basis: Vec<usize>,
    artificial: Vec<bool>,
    rule: PivotRule,
    rhs_scale: f64,
    /// Constraint rows as built, kept in step with `data` for reinversion.
    orig: Vec<f64>,
    /// Current maximization costs per column.
    cost: Vec<f64>,
    pivots_since_reinvert: usize,
}

impl Tableau {
    fn new(std: &StandardForm, rule: PivotRule) -> Self {
        let m = std.rows.len();
        let n_struct = std.n_cols;
        let n_slack = std
            .rows
            .iter()
            .filter(|r| r.relation != Relation::Eq)
            .count();
        let n_art = std
            .rows
            .iter()
            .filter(|r| r.relation != Relation::Le)
            .count();
        let n_cols = n_struct + n_slack + n_art;
        let width = n_cols + 1;
        let mut data = vec![0.0; (m + 1) * width];
        let mut basis = vec![0; m];
        let mut artificial = vec![false; n_cols];
        let mut next_slack = n_struct;
        let mut next_art = n_struct + n_slack;
        let mut rhs_scale = 1.0f64;
        for (i, r) in std.rows.iter().enumerate() {
            let row = &mut data[i * width..(i + 1) * width];
            row[..n_struct].copy_from_slice(&r.coeffs);
            row[n_cols] = r.rhs;
            rhs_scale = rhs_scale.max(r.rhs.abs());
            match r.relation {
                Relation::Le => {
                    row[next_slack] = 1.0;
                    basis[i] = next_slack;
                    next_slack += 1;
                }
                Relation::Ge => {
                    row[next_slack] = -1.0;
                    next_slack += 1;
                    row[next_art] = 1.0;
                    artificial[next_art] = true;
                    basis[i] = next_art;
                    next_art += 1;
                }
                Relation::Eq => {
                    row[next_art] = 1.0;
                    artificial[next_art] = true;
                    basis[i] = next_art;
                    next_art += 1;
                }
            }
        }
        let orig = data[..m * width].to_vec();
        Self {
            m,
            width,
            n_struct,
            n_cols,
            data,
            basis,
            artificial,
            rule,
            rhs_scale,
            orig,
            cost: vec![0.0; n_cols],
            pivots_since_reinvert: 0,
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.n_cols)
    }

    fn pivot(&mut self, r: usize, c: usize) {
        pivot_rows(&mut self.data, self.width, r, c);
        self.basis[r] = c;
        self.pivots_since_reinvert += 1;
    }

    /// Objective row from `cost`, priced out against the current basis.
    fn reset_objective(&mut self) {
        let obj = self.m;
        let w = self.width;
        for j in 0..self.n_cols {
            self.data[obj * w + j] = -self.cost[j];
        }
        self.data[obj * w + self.n_cols] = 0.0;
        for i in 0..self.m {
            let b = self.basis[i];
            let d = self.data[obj * w + b];
            if d != 0.0 {
                for j in 0..w {
                    self.data[obj * w + j] -= d * self.data[i * w + j];
                }
                self.data[obj * w + b] = 0.0;
            }
        }
    }

    /// Dual simplex pivots that remove negative basic values left by
    /// round-off, keeping reduced costs as close to dual feasible as they are.
    fn dual_cleanup(&mut self, allowed: &dyn Fn(usize) -> bool, cap: usize) -> Result<()> {
        let obj = self.m;
        for _ in 0..cap {
            let mut row = None;
            let mut worst = -FEAS_TOL;
            for i in 0..self.m {
                if self.rhs(i) < worst {
                    worst = self.rhs(i);
                    row = Some(i);
                }
            }
            let Some(r) = row else {
                return Ok(());
            };
            let row_max = (0..self.n_cols).fold(0.0f64, |m, j| m.max(self.at(r, j).abs()));
            let tol = PIVOT_TOL.max(REL_PIVOT_TOL * row_max);
            let mut enter: Option<(usize, f64)> = None;
            for j in 0..self.n_cols {
                let a = self.at(r, j);
                if !allowed(j) || a >= -tol {
                    continue;
                }
                let ratio = self.at(obj, j).max(0.0) / -a;
                let better = match enter {
                    None => true,
                    Some((k, best)) => {
                        ratio < best - RATIO_TIE_TOL || (ratio <= best + RATIO_TIE_TOL && -a > -self.at(r, k))
                    }
                };
                if better {
                    enter = Some((j, ratio));
                }
            }
            let Some((c, _)) = enter else {
                return Err(Error::NumericalFailure("basic solution infeasible after reinversion".into()));
            };
            self.pivot(r, c);
        }
        Err(Error::NumericalFailure(format!("iteration cap {cap} reached in cleanup")))
    }

    fn reinvert_or_fail(&mut self) -> Result<()> {
        if self.reinvert() {
            Ok(())
        } else {
            Err(Error::NumericalFailure("basis became singular".into()))
        }
    }

    /// Rebuilds the tableau for the current basis from the original rows,
    /// with partial pivoting. Leaves the tableau untouched if the basis
    /// matrix is numerically singular.
    fn reinvert(&mut self) -> bool {
        let w = self.width;
        let mut data = self.orig.clone();
        data.resize((self.m + 1) * w, 0.0);
        let mut assigned = vec![false; self.m];
        let mut basis = vec![usize::MAX; self.m];
        for &c in &self.basis {
            let mut best = (REINVERT_PIVOT_TOL, None);
            for (i, done) in assigned.iter().enumerate() {
                let a = data[i * w + c].abs();
                if !done && a > best.0 {
                    best = (a, Some(i));
                }
            }
            let Some(r) = best.1 else {
                return false;
            };
            pivot_rows(&mut data, w, r, c);
            assigned[r] = true;
            basis[r] = c;
        }
        self.data = data;
        self.basis = basis;
        self.pivots_since_reinvert = 0;
        self.reset_objective();
        true
    }

    /// Runs simplex iterations on the current objective row.
    fn iterate(&mut self, allowed: &dyn Fn(usize) -> bool, cap: usize) -> Result<LpStatus> {
        let obj = self.m;
        let mut degenerate_run = 0usize;
        let mut bland = self.rule == PivotRule::Bland;
        for _ in 0..cap {
            let mut enter = None;
            let mut best = -OPT_TOL;
            for j in 0..self.n_cols {
                if !allowed(j) {
                    continue;
                }
                let d = self.at(obj, j);
                if d < best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            if self.pivots_since_reinvert >= REINVERT_EVERY {
                self.reinvert_or_fail()?;
                self.dual_cleanup(allowed, cap)?;
                continue;
            }
            let Some(c) = enter else {
                // confirm on a freshly inverted basis
                if self.pivots_since_reinvert > 0 {
                    self.reinvert_or_fail()?;
                self.dual_cleanup(allowed, cap)?;
                    continue;
                }
                return Ok(LpStatus::Optimal);
            };
            let Some((r, best_ratio)) = self.ratio_test(c, bland) else {
                if self.pivots_since_reinvert > 0 {
                    self.reinvert_or_fail()?;
                self.dual_cleanup(allowed, cap)?;
                    continue;
                }
                return Ok(LpStatus::Unbounded);
            };
            let gain = best_ratio * -self.at(obj, c);
            if gain <= 1e-12 * self.rhs(obj).abs().max(1.0) {
                degenerate_run += 1;
                if degenerate_run >= DEGENERATE_RUN_BEFORE_BLAND {
                    bland = true;
                }
            } else {
                degenerate_run = 0;
            }
            self.pivot(r, c);
        }
        Err(Error::NumericalFailure(format!("iteration cap {cap} reached")))
    }

    /// Leaving row for entering column `c`, with its step length.
    ///
    /// Pivots below a fraction of the column's largest entry are ignored.
    /// Among rows tied at the minimum ratio, Bland mode takes the lowest
    /// basic index; otherwise the largest pivot wins, which keeps
    /// near-parallel rows from producing tiny pivots.
    fn ratio_test(&self, c: usize, bland: bool) -> Option<(usize, f64)> {
        let col_max = (0..self.m).fold(0.0f64, |m, i| m.max(self.at(i, c).abs()));
        let tol = PIVOT_TOL.max(REL_PIVOT_TOL * col_max);
        let mut min_ratio = f64::INFINITY;
        for i in 0..self.m {
            let a = self.at(i, c);
            if a > tol {
                min_ratio = min_ratio.min(self.rhs(i).max(0.0) / a);
            }
        }
        if !min_ratio.is_finite() {
            return None;
        }
        let cutoff = min_ratio + RATIO_TIE_TOL * min_ratio.max(1.0);
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..self.m {
            let a = self.at(i, c);
            if a <= tol {
                continue;
            }
            let ratio = self.rhs(i).max(0.0) / a;
            if ratio > cutoff {
                continue;
            }
            let better = match leave {
                None => true,
                Some((l, _)) if bland => self.basis[i] < self.basis[l],
                Some((l, _)) => {
                    let al = self.at(l, c);
                    a > al || (a == al && self.basis[i] < self.basis[l])
                }
            };
            if better {
                leave = Some((i, ratio));
            }
        }
        leave.map(|(r, _)| (r, min_ratio))
    }

    fn phase_one(&mut self, cap: usize) -> Result<PhaseOne> {
        let obj = self.m;
        let w = self.width;
        // maximize −Σ artificials
        self.cost = self.artificial.iter().map(|&a| if a { -1.0 } else { 0.0 }).collect();
        self.reset_objective();
        if self.artificial.iter().any(|&a| a) {
            self.iterate(&|_| true, cap)?;
            let value = self.rhs(obj);
            if value < -FEAS_TOL * self.rhs_scale {
                return Ok(PhaseOne::Infeasible);
            }
        }
        // drive remaining artificials out of the basis; drop redundant rows
        let mut i = 0;
        while i < self.m {
            if self.artificial[self.basis[i]] {
                let mut col = None;
                let mut best = 1e-9;
                for j in (0..self.n_cols).filter(|&j| !self.artificial[j]) {
                    let a = self.at(i, j).abs();
                    if a > best {
                        best = a;
                        col = Some(j);
                    }
                }
                match col {
                    Some(j) => {
                        self.pivot(i, j);
                        i += 1;
                    }
                    None => self.remove_row(i),
                }
            } else {
                i += 1;
            }
        }
        for i in 0..self.m {
            let idx = i * w + self.n_cols;
            if self.data[idx] < 0.0 {
                self.data[idx] = 0.0;
            }
        }
        Ok(PhaseOne::Feasible)
    }

    fn remove_row(&mut self, i: usize) {
        let w = self.width;
        self.data.drain(i * w..(i + 1) * w);
        self.orig.drain(i * w..(i + 1) * w);
        self.basis.remove(i);
        self.m -= 1;
    }

    fn phase_two(&mut self, cost: &[f64], cap: usize) -> Result<LpStatus> {
        self.cost = (0..self.n_cols).map(|j| if j < self.n_struct { cost[j] } else { 0.0 }).collect();
        self.reset_objective();
        let artificial = self.artificial.clone();
        self.iterate(&|j| !artificial[j], cap)
    }

    fn primal(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.n_struct];
        for i in 0..self.m {
            let b = self.basis[i];
            if b < self.n_struct {
                x[b] = self.rhs(i).max(0.0);
            }
        }
        x
    }
}

/// Gauss–Jordan pivot on `(r, c)` over every row of a row-major tableau.
fn pivot_rows(data: &mut [f64], w: usize, r: usize, c: usize) {
    let inv = 1.0 / data[r * w + c];
    let (before, rest) = data.split_at_mut(r * w);
    let (prow, after) = rest.split_at_mut(w);
    for v in prow.iter_mut() {
        *v *= inv;
    }
    prow[c] = 1.0;
    let prow: &[f64] = prow;
    let eliminate = |row: &mut [f64]| {
        let f = row[c];
        if f != 0.0 {
            for (x, p) in row.iter_mut().zip(prow) {
                *x -= f * p;
            }
            row[c] = 0.0;
        }
    };
    for row in before.chunks_exact_mut(w) {
        eliminate(row);
    }
    for row in after.chunks_exact_mut(w) {
        eliminate(row);
    }
}
