//! Linear programs with `<=`, `=`, `>=` rows, nonnegative or free
//! variables and optional finite upper bounds, solved by a two-phase
//! revised simplex method.
//!
//! Duals are reported as shadow prices: `dual[i]` is the rate of change of
//! the optimal objective with respect to `rhs[i]`, whatever the sense.

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-8;
const OPT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 64;
const DEGENERATE_STREAK: usize = 30;

/// Sparse row, relation and right-hand side.
type Row = (Vec<(usize, f64)>, Relation, f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpConstraint {
    pub coeffs: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

/// Lower bound is either `0` or `-inf`; upper bound is `+inf` or finite.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VarBounds {
    pub free: bool,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub sense: Sense,
    pub objective: Vec<f64>,
    pub constraints: Vec<LpConstraint>,
    pub bounds: Vec<VarBounds>,
}

impl LpProblem {
    pub fn new(sense: Sense, objective: Vec<f64>) -> Self {
        let n = objective.len();
        Self {
            sense,
            objective,
            constraints: Vec::new(),
            bounds: vec![VarBounds::default(); n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.constraints.len()
    }

    /// Appends a row and returns its index.
    pub fn add_constraint(&mut self, coeffs: Vec<(usize, f64)>, relation: Relation, rhs: f64) -> usize {
        self.constraints.push(LpConstraint { coeffs, relation, rhs });
        self.constraints.len() - 1
    }

    pub fn set_free(&mut self, var: usize) {
        self.bounds[var].free = true;
    }

    pub fn set_upper(&mut self, var: usize, upper: f64) {
        self.bounds[var].upper = Some(upper);
    }

    /// Left-hand side of every row at `x`.
    pub fn row_activity(&self, x: &[f64]) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|c| c.coeffs.iter().map(|&(j, a)| a * x[j]).sum())
            .collect()
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    /// Largest violation of any row or bound at `x`.
    pub fn primal_residual(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (c, lhs) in self.constraints.iter().zip(self.row_activity(x)) {
            let viol = match c.relation {
                Relation::Le => lhs - c.rhs,
                Relation::Ge => c.rhs - lhs,
                Relation::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(viol);
        }
        for (b, &xj) in self.bounds.iter().zip(x) {
            if !b.free {
                worst = worst.max(-xj);
            }
            if let Some(u) = b.upper {
                worst = worst.max(xj - u);
            }
        }
        worst
    }

    fn check_dimensions(&self) -> Result<()> {
        let n = self.num_vars();
        if self.bounds.len() != n {
            return Err(Error::LpDimension(format!(
                "{} bounds for {n} variables",
                self.bounds.len()
            )));
        }
        if let Some(c) = self.objective.iter().find(|c| !c.is_finite()) {
            return Err(Error::LpDimension(format!("objective coefficient {c} is not finite")));
        }
        for (i, row) in self.constraints.iter().enumerate() {
            if !row.rhs.is_finite() {
                return Err(Error::LpDimension(format!("row {i} has non-finite rhs")));
            }
            for &(j, a) in &row.coeffs {
                if j >= n {
                    return Err(Error::LpDimension(format!("row {i} references variable {j} of {n}")));
                }
                if !a.is_finite() {
                    return Err(Error::LpDimension(format!("row {i} has non-finite coefficient")));
                }
            }
        }
        for (j, b) in self.bounds.iter().enumerate() {
            if let Some(u) = b.upper {
                if u.is_nan() || u == f64::NEG_INFINITY {
                    return Err(Error::LpDimension(format!("variable {j} has invalid upper bound")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub primal: Vec<f64>,
    /// One shadow price per constraint row.
    pub dual: Vec<f64>,
    /// Shadow price of each variable's finite upper bound (0 when absent).
    pub upper_dual: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl LpSolution {
    fn empty(status: LpStatus, n: usize, m: usize, iterations: usize) -> Self {
        Self {
            status,
            primal: vec![0.0; n],
            dual: vec![0.0; m],
            upper_dual: vec![0.0; n],
            objective: f64::NAN,
            iterations,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }

    /// `b'y + u'w`, which equals the primal objective at an optimum.
    pub fn dual_objective(&self, problem: &LpProblem) -> f64 {
        let rows: f64 = problem.constraints.iter().zip(&self.dual).map(|(c, y)| c.rhs * y).sum();
        let bounds: f64 = problem
            .bounds
            .iter()
            .zip(&self.upper_dual)
            .filter_map(|(b, w)| b.upper.map(|u| u * w))
            .sum();
        rows + bounds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ColKind {
    Structural,
    Slack,
    Artificial,
}

/// Internal standard form: `min c'x, Ax = b, x >= 0, b >= 0`.
struct StandardForm {
    m: usize,
    cols: Vec<Vec<(usize, f64)>>,
    cost: Vec<f64>,
    kind: Vec<ColKind>,
    b: Vec<f64>,
    /// `+1` or `-1` per internal row (rows negated to make `b >= 0`).
    row_sign: Vec<f64>,
    /// internal column(s) of each original variable: (plus, minus)
    var_cols: Vec<(usize, Option<usize>)>,
    /// internal row of each original upper bound
    upper_rows: Vec<Option<usize>>,
    initial_basis: Vec<usize>,
}

impl StandardForm {
    fn build(p: &LpProblem) -> Self {
        let n = p.num_vars();
        let obj_sign = match p.sense {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        };
        let mut cols: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut cost = Vec::new();
        let mut kind = Vec::new();
        let mut var_cols = Vec::with_capacity(n);
        for j in 0..n {
            let c = obj_sign * p.objective[j];
            cols.push(Vec::new());
            cost.push(c);
            kind.push(ColKind::Structural);
            let plus = cols.len() - 1;
            let minus = if p.bounds[j].free {
                cols.push(Vec::new());
                cost.push(-c);
                kind.push(ColKind::Structural);
                Some(cols.len() - 1)
            } else {
                None
            };
            var_cols.push((plus, minus));
        }

        let mut rows: Vec<Row> = p
            .constraints
            .iter()
            .map(|c| {
                let mut coeffs = Vec::with_capacity(c.coeffs.len());
                for &(j, a) in &c.coeffs {
                    let (plus, minus) = var_cols[j];
                    coeffs.push((plus, a));
                    if let Some(mi) = minus {
                        coeffs.push((mi, -a));
                    }
                }
                (coeffs, c.relation, c.rhs)
            })
            .collect();
        let mut upper_rows = vec![None; n];
        for j in 0..n {
            if let Some(u) = p.bounds[j].upper {
                if u.is_finite() {
                    let (plus, minus) = var_cols[j];
                    let mut coeffs = vec![(plus, 1.0)];
                    if let Some(mi) = minus {
                        coeffs.push((mi, -1.0));
                    }
                    upper_rows[j] = Some(rows.len());
                    rows.push((coeffs, Relation::Le, u));
                }
            }
        }

        let m = rows.len();
        let mut b = Vec::with_capacity(m);
        let mut row_sign = Vec::with_capacity(m);
        let mut initial_basis = Vec::with_capacity(m);
        for (i, (coeffs, rel, rhs)) in rows.into_iter().enumerate() {
            let sign = if rhs < 0.0 { -1.0 } else { 1.0 };
            let rel = match (rel, sign < 0.0) {
                (Relation::Le, true) => Relation::Ge,
                (Relation::Ge, true) => Relation::Le,
                (r, _) => r,
            };
            for (col, a) in coeffs {
                if a != 0.0 {
                    cols[col].push((i, sign * a));
                }
            }
            b.push(sign * rhs);
            row_sign.push(sign);
            match rel {
                Relation::Le => {
                    cols.push(vec![(i, 1.0)]);
                    cost.push(0.0);
                    kind.push(ColKind::Slack);
                    initial_basis.push(cols.len() - 1);
                }
                Relation::Ge => {
                    cols.push(vec![(i, -1.0)]);
                    cost.push(0.0);
                    kind.push(ColKind::Slack);
                    cols.push(vec![(i, 1.0)]);
                    cost.push(0.0);
                    kind.push(ColKind::Artificial);
                    initial_basis.push(cols.len() - 1);
                }
                Relation::Eq => {
                    cols.push(vec![(i, 1.0)]);
                    cost.push(0.0);
                    kind.push(ColKind::Artificial);
                    initial_basis.push(cols.len() - 1);
                }
            }
        }
        // merge duplicate row entries within a column (free vars appearing twice)
        for col in cols.iter_mut() {
            col.sort_by_key(|e| e.0);
            col.dedup_by(|later, earlier| {
                if later.0 == earlier.0 {
                    earlier.1 += later.1;
                    true
                } else {
                    false
                }
            });
        }
        Self {
            m,
            cols,
            cost,
            kind,
            b,
            row_sign,
            var_cols,
            upper_rows,
            initial_basis,
        }
    }
}

enum PhaseOutcome {
    Optimal,
    Unbounded,
    Failed,
}

struct Simplex<'a> {
    sf: &'a StandardForm,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    /// dense row-major `m x m` basis inverse
    binv: Vec<f64>,
    xb: Vec<f64>,
    iterations: usize,
    max_iterations: usize,
    since_refactor: usize,
    // scratch
    y: Vec<f64>,
    col: Vec<f64>,
}

impl<'a> Simplex<'a> {
    fn new(sf: &'a StandardForm) -> Self {
        let m = sf.m;
        let ncols = sf.cols.len();
        let mut is_basic = vec![false; ncols];
        for &j in &sf.initial_basis {
            is_basic[j] = true;
        }
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        Self {
            sf,
            basis: sf.initial_basis.clone(),
            is_basic,
            binv,
            xb: sf.b.clone(),
            iterations: 0,
            max_iterations: 50 * (m + ncols) + 10_000,
            since_refactor: 0,
            y: vec![0.0; m],
            col: vec![0.0; m],
        }
    }

    /// Recomputes the basis inverse from scratch by Gauss-Jordan elimination.
    fn refactor(&mut self) -> bool {
        let m = self.sf.m;
        let mut a = vec![0.0; m * m];
        for (k, &j) in self.basis.iter().enumerate() {
            for &(i, v) in &self.sf.cols[j] {
                a[i * m + k] = v;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for c in 0..m {
            let (piv, best) =
                (c..m)
                    .map(|r| (r, a[r * m + c].abs()))
                    .fold((c, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best < 1e-12 {
                return false;
            }
            if piv != c {
                for k in 0..m {
                    a.swap(piv * m + k, c * m + k);
                    inv.swap(piv * m + k, c * m + k);
                }
            }
            let d = a[c * m + c];
            for k in 0..m {
                a[c * m + k] /= d;
                inv[c * m + k] /= d;
            }
            for r in 0..m {
                if r != c {
                    let f = a[r * m + c];
                    if f != 0.0 {
                        for k in 0..m {
                            a[r * m + k] -= f * a[c * m + k];
                            inv[r * m + k] -= f * inv[c * m + k];
                        }
                    }
                }
            }
        }
        // inv is B^{-1} with rows indexed by basis position
        self.binv = inv;
        for i in 0..m {
            let row = &self.binv[i * m..(i + 1) * m];
            let v: f64 = row.iter().zip(&self.sf.b).map(|(x, b)| x * b).sum();
            self.xb[i] = if v < 0.0 && v > -FEAS_TOL { 0.0 } else { v };
        }
        self.since_refactor = 0;
        true
    }

    fn compute_duals(&mut self, cost: &[f64]) {
        let m = self.sf.m;
        self.y.iter_mut().for_each(|v| *v = 0.0);
        for (i, &j) in self.basis.iter().enumerate() {
            let cb = cost[j];
            if cb != 0.0 {
                let row = &self.binv[i * m..(i + 1) * m];
                for (yk, r) in self.y.iter_mut().zip(row) {
                    *yk += cb * r;
                }
            }
        }
    }

    fn reduced_cost(&self, cost: &[f64], j: usize) -> f64 {
        cost[j] - self.sf.cols[j].iter().map(|&(i, a)| self.y[i] * a).sum::<f64>()
    }

    fn load_column(&mut self, j: usize) {
        let m = self.sf.m;
        self.col.iter_mut().for_each(|v| *v = 0.0);
        for &(k, a) in &self.sf.cols[j] {
            for i in 0..m {
                self.col[i] += self.binv[i * m + k] * a;
            }
        }
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let m = self.sf.m;
        let theta = self.xb[r] / self.col[r];
        for i in 0..m {
            if i != r {
                self.xb[i] -= theta * self.col[i];
                if self.xb[i] < 0.0 && self.xb[i] > -FEAS_TOL {
                    self.xb[i] = 0.0;
                }
            }
        }
        self.xb[r] = theta;
        let pr = self.col[r];
        for k in 0..m {
            self.binv[r * m + k] /= pr;
        }
        for i in 0..m {
            if i != r {
                let f = self.col[i];
                if f != 0.0 {
                    for k in 0..m {
                        self.binv[i * m + k] -= f * self.binv[r * m + k];
                    }
                }
            }
        }
        self.is_basic[self.basis[r]] = false;
        self.is_basic[q] = true;
        self.basis[r] = q;
        self.iterations += 1;
        self.since_refactor += 1;
    }

    /// Runs simplex iterations for `cost`. Artificial columns never enter
    /// when `allow_artificial` is false.
    fn run(&mut self, cost: &[f64], allow_artificial: bool) -> PhaseOutcome {
        let ncols = self.sf.cols.len();
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations >= self.max_iterations {
                return PhaseOutcome::Failed;
            }
            if self.since_refactor >= REFACTOR_EVERY && !self.refactor() {
                return PhaseOutcome::Failed;
            }
            self.compute_duals(cost);
            let bland = degenerate_run >= DEGENERATE_STREAK;
            let mut entering = None;
            let mut best = -OPT_TOL;
            for j in 0..ncols {
                if self.is_basic[j] || (!allow_artificial && self.sf.kind[j] == ColKind::Artificial) {
                    continue;
                }
                let d = self.reduced_cost(cost, j);
                if d < best {
                    entering = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(q) = entering else {
                return PhaseOutcome::Optimal;
            };
            self.load_column(q);
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for i in 0..self.sf.m {
                let u = self.col[i];
                let basic_artificial = !allow_artificial && self.sf.kind[self.basis[i]] == ColKind::Artificial;
                let ratio = if basic_artificial && u.abs() > PIVOT_TOL {
                    0.0
                } else if u > PIVOT_TOL {
                    self.xb[i].max(0.0) / u
                } else {
                    continue;
                };
                let better = match leave {
                    None => true,
                    Some(l) => {
                        ratio < best_ratio - 1e-12 || (ratio <= best_ratio + 1e-12 && self.basis[i] < self.basis[l])
                    }
                };
                if better {
                    leave = Some(i);
                    best_ratio = best_ratio.min(ratio);
                }
            }
            let Some(r) = leave else {
                return PhaseOutcome::Unbounded;
            };
            if best_ratio <= FEAS_TOL {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(r, q);
        }
    }

    /// Pivots zero-valued artificials out of the basis where possible.
    fn expel_artificials(&mut self) {
        let ncols = self.sf.cols.len();
        for r in 0..self.sf.m {
            if self.sf.kind[self.basis[r]] != ColKind::Artificial {
                continue;
            }
            let m = self.sf.m;
            let mut best: Option<(usize, f64)> = None;
            for j in 0..ncols {
                if self.is_basic[j] || self.sf.kind[j] == ColKind::Artificial {
                    continue;
                }
                let u: f64 = self.sf.cols[j].iter().map(|&(k, a)| self.binv[r * m + k] * a).sum();
                if u.abs() > 1e-7 && best.is_none_or(|(_, b)| u.abs() > b) {
                    best = Some((j, u.abs()));
                }
            }
            if let Some((j, _)) = best {
                self.load_column(j);
                self.pivot(r, j);
            }
        }
    }
}

/// Solves `problem`. Dimension errors are `Err`; infeasibility,
/// unboundedness and numerical trouble are reported through
/// [`LpSolution::status`].
pub fn solve_lp(problem: &LpProblem) -> Result<LpSolution> {
    problem.check_dimensions()?;
    let n = problem.num_vars();
    let m_orig = problem.num_rows();
    for b in &problem.bounds {
        if let (false, Some(u)) = (b.free, b.upper) {
            if u < 0.0 {
                return Ok(LpSolution::empty(LpStatus::Infeasible, n, m_orig, 0));
            }
        }
    }
    let sf = StandardForm::build(problem);
    let mut spx = Simplex::new(&sf);

    let has_artificial = sf.initial_basis.iter().any(|&j| sf.kind[j] == ColKind::Artificial);
    if has_artificial {
        let phase1: Vec<f64> = sf
            .kind
            .iter()
            .map(|k| if *k == ColKind::Artificial { 1.0 } else { 0.0 })
            .collect();
        match spx.run(&phase1, true) {
            PhaseOutcome::Optimal => {}
            PhaseOutcome::Unbounded | PhaseOutcome::Failed => {
                return Ok(LpSolution::empty(LpStatus::NumericalFailure, n, m_orig, spx.iterations));
            }
        }
        if !spx.refactor() {
            return Ok(LpSolution::empty(LpStatus::NumericalFailure, n, m_orig, spx.iterations));
        }
        let infeas: f64 = spx
            .basis
            .iter()
            .zip(&spx.xb)
            .filter(|(j, _)| sf.kind[**j] == ColKind::Artificial)
            .map(|(_, x)| x.max(0.0))
            .sum();
        let scale = 1.0 + sf.b.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if infeas > FEAS_TOL * scale {
            return Ok(LpSolution::empty(LpStatus::Infeasible, n, m_orig, spx.iterations));
        }
        spx.expel_artificials();
    }

    match spx.run(&sf.cost, false) {
        PhaseOutcome::Optimal => {}
        PhaseOutcome::Unbounded => {
            return Ok(LpSolution::empty(LpStatus::Unbounded, n, m_orig, spx.iterations));
        }
        PhaseOutcome::Failed => {
            return Ok(LpSolution::empty(LpStatus::NumericalFailure, n, m_orig, spx.iterations));
        }
    }
    // fresh factorization for accurate final values; re-optimize if drift
    // left a reduced cost negative
    if !spx.refactor() {
        return Ok(LpSolution::empty(LpStatus::NumericalFailure, n, m_orig, spx.iterations));
    }
    if !matches!(spx.run(&sf.cost, false), PhaseOutcome::Optimal) {
        return Ok(LpSolution::empty(LpStatus::NumericalFailure, n, m_orig, spx.iterations));
    }
    spx.compute_duals(&sf.cost);

    let mut xfull = vec![0.0; sf.cols.len()];
    for (i, &j) in spx.basis.iter().enumerate() {
        xfull[j] = spx.xb[i];
    }
    let primal: Vec<f64> = sf
        .var_cols
        .iter()
        .map(|&(plus, minus)| {
            let v = xfull[plus] - minus.map_or(0.0, |mi| xfull[mi]);
            if v.abs() < 1e-13 {
                0.0
            } else {
                v
            }
        })
        .collect();
    let obj_sign = match problem.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let dual: Vec<f64> = (0..m_orig).map(|i| obj_sign * sf.row_sign[i] * spx.y[i]).collect();
    let upper_dual: Vec<f64> = sf
        .upper_rows
        .iter()
        .map(|r| r.map_or(0.0, |i| obj_sign * sf.row_sign[i] * spx.y[i]))
        .collect();
    let objective = problem.objective_value(&primal);

    let scale = 1.0
        + problem.constraints.iter().fold(0.0f64, |a, c| a.max(c.rhs.abs()))
        + primal.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let residual = problem.primal_residual(&primal);
    if !(residual <= FEAS_TOL * scale) || !objective.is_finite() {
        return Ok(LpSolution::empty(LpStatus::NumericalFailure, n, m_orig, spx.iterations));
    }

    Ok(LpSolution {
        status: LpStatus::Optimal,
        primal,
        dual,
        upper_dual,
        objective,
        iterations: spx.iterations,
    })
}
