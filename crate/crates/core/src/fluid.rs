//! Fluid (large-population) view of the system, per unit of replication.
//!
//! Everything here works on the base system: one representative arm per
//! group and the per-unit capacity `C`. Quantities are fractions of a group
//! (`y`, `z`) or discounted occupancy measures (`x`).

use std::io::Write;

use crate::arm::{policy_iteration, q_values, solve_dual_mu_lp};
use crate::error::{Error, Result};
use crate::index::IndexTable;
use crate::linprog::{solve_lp, LpProblem, LpStatus, Relation, Sense};
use crate::model::{ArmModel, SystemSpec};

/// Default tolerance of every certificate check.
pub const KKT_TOLERANCE: f64 = 1e-6;
/// Sup-norm gap between successive fluid states that counts as converged.
pub const ATTRACTOR_TOLERANCE: f64 = 1e-9;
/// Upper limit on the number of joint states handled by the exact oracle.
pub const JOINT_STATE_LIMIT: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct FluidState {
    /// `y[n][s]`
    pub y: Vec<Vec<f64>>,
    /// `z[n][s][a]`
    pub z: Vec<Vec<[f64; 2]>>,
}

impl FluidState {
    pub fn from_y(y: Vec<Vec<f64>>) -> Self {
        let z = y.iter().map(|row| row.iter().map(|&m| [m, 0.0]).collect()).collect();
        Self { y, z }
    }

    /// Every group at its initial distribution, nothing activated.
    pub fn initial(system: &SystemSpec) -> Self {
        Self::from_y(system.group_arms().map(|a| a.init_dist().to_vec()).collect())
    }

    pub fn active_mass(&self) -> f64 {
        self.z.iter().flatten().map(|z| z[1]).sum()
    }

    /// Largest deviation from `sum_s y = 1`, `z0 + z1 = y`, and nonnegativity.
    pub fn invariant_residual(&self) -> f64 {
        let mut r: f64 = 0.0;
        for (yn, zn) in self.y.iter().zip(&self.z) {
            r = r.max((yn.iter().sum::<f64>() - 1.0).abs());
            for (y, z) in yn.iter().zip(zn) {
                r = r.max((z[0] + z[1] - y).abs()).max(-y).max(-z[0]).max(-z[1]);
            }
        }
        r
    }

    fn sup_distance(&self, other: &FluidState) -> f64 {
        self.y
            .iter()
            .flatten()
            .zip(other.y.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_state_shape(system: &SystemSpec, y: &[Vec<f64>]) -> Result<()> {
    let ok = y.len() == system.num_groups()
        && system
            .group_arms()
            .zip(y)
            .all(|(arm, row)| row.len() == arm.num_states());
    if !ok {
        return Err(Error::InvalidArgument(
            "fluid state shape does not match the system groups".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidSolution {
    /// `x[n][s][a]`
    pub x: Vec<Vec<[f64; 2]>>,
    pub objective: f64,
    pub lambda_star: f64,
    pub mu_star: Vec<f64>,
    /// Discounted penalty in excess of each group's budget. Nonzero only
    /// when the multipliers are capped and the budget is out of reach.
    pub overflow: Vec<f64>,
}

impl FluidSolution {
    /// Objective times `1 - beta`: the reward per step per unit of
    /// replication, comparable with simulated `reward / K`.
    pub fn per_step_value(&self, beta: f64) -> f64 {
        (1.0 - beta) * self.objective
    }
}

/// Column offsets of each group's `x(n,s,a)` block (`2s + a` inside).
fn group_offsets(arms: &[&ArmModel]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(arms.len() + 1);
    let mut acc = 0;
    for arm in arms {
        offsets.push(acc);
        acc += 2 * arm.num_states();
    }
    offsets.push(acc);
    offsets
}

struct FluidLp {
    lp: LpProblem,
    offsets: Vec<usize>,
    capacity_row: usize,
    penalty_rows: Vec<usize>,
}

fn build_fluid_lp(system: &SystemSpec, y0: &[Vec<f64>], mu_cap: Option<f64>) -> FluidLp {
    let base = system.base_system();
    let beta = base.discount;
    let arms: Vec<&ArmModel> = base.arms.iter().collect();
    let offsets = group_offsets(&arms);
    let nx = offsets[arms.len()];
    let mut objective = vec![0.0; nx];
    for (n, arm) in arms.iter().enumerate() {
        for s in 0..arm.num_states() {
            objective[offsets[n] + 2 * s] = arm.reward(s, 0);
            objective[offsets[n] + 2 * s + 1] = arm.reward(s, 1);
        }
    }
    // overflow columns let the penalty multipliers saturate at the cap
    if let Some(u) = mu_cap {
        objective.extend(std::iter::repeat_n(-u, arms.len()));
    }
    let mut lp = LpProblem::new(Sense::Maximize, objective);

    for (n, arm) in arms.iter().enumerate() {
        let ns = arm.num_states();
        let mut rows: Vec<Vec<(usize, f64)>> = (0..ns)
            .map(|s| vec![(offsets[n] + 2 * s, 1.0), (offsets[n] + 2 * s + 1, 1.0)])
            .collect();
        for from in 0..ns {
            for a in 0..2 {
                for (to, &p) in arm.kernel_row(from, a).iter().enumerate() {
                    if p != 0.0 {
                        rows[to].push((offsets[n] + 2 * from + a, -beta * p));
                    }
                }
            }
        }
        for (s, coeffs) in rows.into_iter().enumerate() {
            lp.add_constraint(coeffs, Relation::Eq, y0[n][s]);
        }
    }

    let cap: Vec<(usize, f64)> = arms
        .iter()
        .enumerate()
        .flat_map(|(n, arm)| {
            let off = offsets[n];
            (0..arm.num_states()).map(move |s| (off + 2 * s + 1, 1.0))
        })
        .collect();
    let capacity_row = lp.add_constraint(cap, Relation::Le, base.capacity as f64 / (1.0 - beta));

    let mut penalty_rows = Vec::with_capacity(arms.len());
    for (n, arm) in arms.iter().enumerate() {
        let mut coeffs: Vec<(usize, f64)> = (0..arm.num_states())
            .flat_map(|s| {
                [
                    (offsets[n] + 2 * s, arm.penalty(s, 0)),
                    (offsets[n] + 2 * s + 1, arm.penalty(s, 1)),
                ]
            })
            .filter(|&(_, g)| g != 0.0)
            .collect();
        if mu_cap.is_some() {
            coeffs.push((nx + n, -1.0));
        }
        penalty_rows.push(lp.add_constraint(coeffs, Relation::Le, arm.budget() / (1.0 - beta)));
    }
    FluidLp {
        lp,
        offsets,
        capacity_row,
        penalty_rows,
    }
}

fn unpack_x(system: &SystemSpec, offsets: &[usize], flat: &[f64]) -> Vec<Vec<[f64; 2]>> {
    system
        .group_arms()
        .enumerate()
        .map(|(n, arm)| {
            (0..arm.num_states())
                .map(|s| [flat[offsets[n] + 2 * s], flat[offsets[n] + 2 * s + 1]])
                .collect()
        })
        .collect()
}

/// Relaxed problem: capacity and penalties only in discounted expectation.
///
/// With `mu_cap = Some(U)` each penalty row gets an overflow column priced
/// at `U`, which is the primal counterpart of capping `mu_n <= U` in the
/// dual; `None` gives the plain relaxation.
pub fn solve_fluid_relaxed(system: &SystemSpec, y0: &FluidState, mu_cap: Option<f64>) -> Result<FluidSolution> {
    check_state_shape(system, &y0.y)?;
    if let Some(u) = mu_cap {
        if !(u >= 0.0 && u.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "multiplier cap {u} must be finite and nonnegative"
            )));
        }
    }
    let built = build_fluid_lp(system, &y0.y, mu_cap);
    let sol = solve_lp(&built.lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Solver {
            status: sol.status,
            context: "solving the fluid relaxation".into(),
        });
    }
    Ok(FluidSolution {
        x: unpack_x(system, &built.offsets, &sol.primal),
        objective: sol.objective,
        lambda_star: sol.dual[built.capacity_row].max(0.0),
        mu_star: built.penalty_rows.iter().map(|&r| sol.dual[r].max(0.0)).collect(),
        overflow: match mu_cap {
            Some(_) => sol.primal[built.offsets[built.penalty_rows.len()]..].to_vec(),
            None => vec![0.0; built.penalty_rows.len()],
        },
    })
}

/// `sum_n L_n(lambda, mu_n*(lambda)) + lambda C / (1 - beta)` on the base
/// system, each arm started from its own initial distribution.
pub fn sys_dual_value(system: &SystemSpec, lambda: f64, mu_cap: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "capacity price {lambda} must be nonnegative"
        )));
    }
    let base = system.base_system();
    let mut total = lambda * base.capacity as f64 / (1.0 - base.discount);
    for arm in &base.arms {
        total += solve_dual_mu_lp(arm, lambda, base.discount, mu_cap)?.dual_objective;
    }
    Ok(total)
}

/// Bound on the capacity price: no state is worth activating above it.
pub fn sys_dual_search_bound(system: &SystemSpec, mu_cap: f64) -> f64 {
    system
        .group_arms()
        .map(|a| crate::index::default_search_bound(a, system.discount, mu_cap))
        .fold(1.0, f64::max)
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Golden-section search of the convex dual over `[0, bound]`.
pub fn minimize_sys_dual(system: &SystemSpec, mu_cap: f64, bound: f64) -> Result<(f64, f64)> {
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::InvalidArgument(format!("search bound {bound} must be positive")));
    }
    let f = |l: f64| sys_dual_value(system, l, mu_cap);
    let (mut a, mut b) = (0.0_f64, bound);
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > 1e-11 * bound.max(1.0) {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d)?;
        }
    }
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    // the minimum may sit on the boundary of the feasible price range
    let f0 = f(0.0)?;
    if f0 <= best.1 + 1e-12 * (1.0 + best.1.abs()) {
        best = (0.0, f0);
    }
    Ok(best)
}

/// Water-filling solution of the per-step index program: activate the
/// highest positive-index mass up to `capacity`, splitting the marginal
/// state. Equal indices are served in `(n, s)` order.
pub fn fluid_index_step(tables: &[IndexTable], y: &[Vec<f64>], capacity: f64) -> FluidState {
    let mut order: Vec<(usize, usize)> = y
        .iter()
        .enumerate()
        .flat_map(|(n, row)| (0..row.len()).map(move |s| (n, s)))
        .filter(|&(n, s)| tables[n].index[s] > 0.0)
        .collect();
    order.sort_by(|&(n1, s1), &(n2, s2)| {
        tables[n2].index[s2]
            .total_cmp(&tables[n1].index[s1])
            .then((n1, s1).cmp(&(n2, s2)))
    });
    let mut z: Vec<Vec<[f64; 2]>> = y.iter().map(|row| row.iter().map(|&m| [m, 0.0]).collect()).collect();
    let mut left = capacity.max(0.0);
    for (n, s) in order {
        if left <= 0.0 {
            break;
        }
        let take = y[n][s].min(left);
        z[n][s] = [y[n][s] - take, take];
        left -= take;
    }
    FluidState { y: y.to_vec(), z }
}

/// `y'(n,s) = sum_{s',a} P_n(s | s', a) z(n,s',a)`.
pub fn push_forward(system: &SystemSpec, state: &FluidState) -> Vec<Vec<f64>> {
    system
        .group_arms()
        .zip(&state.z)
        .map(|(arm, zn)| {
            let mut next = vec![0.0; arm.num_states()];
            for (from, z) in zn.iter().enumerate() {
                for a in 0..2 {
                    if z[a] == 0.0 {
                        continue;
                    }
                    for (to, p) in arm.kernel_row(from, a).iter().enumerate() {
                        next[to] += p * z[a];
                    }
                }
            }
            next
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidTrajectory {
    /// Fluid states with activations filled in, starting from `y0`.
    pub states: Vec<FluidState>,
    /// Step at which successive states first agreed to within
    /// [`ATTRACTOR_TOLERANCE`]; the last state is then the attractor
    /// candidate.
    pub converged_at: Option<usize>,
}

impl FluidTrajectory {
    pub fn attractor(&self) -> Option<&FluidState> {
        self.converged_at.and(self.states.last())
    }
}

/// Runs the index policy on the fluid model for up to `steps` steps,
/// stopping early once the state stops moving.
pub fn fluid_trajectory(
    system: &SystemSpec,
    tables: &[IndexTable],
    y0: &FluidState,
    steps: usize,
) -> Result<FluidTrajectory> {
    check_state_shape(system, &y0.y)?;
    if tables.len() != system.num_groups() {
        return Err(Error::InvalidArgument(format!(
            "{} index tables for {} groups",
            tables.len(),
            system.num_groups()
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("trajectory length must be >= 1".into()));
    }
    let capacity = system.base_system().capacity as f64;
    let mut states = vec![fluid_index_step(tables, &y0.y, capacity)];
    let mut converged_at = None;
    for t in 1..steps {
        let y = push_forward(system, states.last().unwrap());
        let next = fluid_index_step(tables, &y, capacity);
        let gap = next.sup_distance(states.last().unwrap());
        states.push(next);
        if gap <= ATTRACTOR_TOLERANCE {
            converged_at = Some(t);
            break;
        }
    }
    Ok(FluidTrajectory { states, converged_at })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    pub primal_ok: bool,
    pub primal_residual: f64,
    pub dual_ok: bool,
    pub dual_residual: f64,
    pub slackness_ok: bool,
    pub slackness_residual: f64,
    pub lagrangian_ok: bool,
    pub lagrangian_residual: f64,
    /// Always true for direct checks; false when an attractor lacks a
    /// strict index separator.
    pub separator_ok: bool,
    pub separator_residual: f64,
    pub lambda: f64,
    pub mu: Vec<f64>,
}

impl KktReport {
    pub fn all_ok(&self) -> bool {
        self.primal_ok && self.dual_ok && self.slackness_ok && self.lagrangian_ok && self.separator_ok
    }

    fn failed_separator(residual: f64, num_groups: usize) -> Self {
        Self {
            primal_ok: false,
            primal_residual: f64::NAN,
            dual_ok: false,
            dual_residual: f64::NAN,
            slackness_ok: false,
            slackness_residual: f64::NAN,
            lagrangian_ok: false,
            lagrangian_residual: f64::NAN,
            separator_ok: false,
            separator_residual: residual,
            lambda: f64::NAN,
            mu: vec![f64::NAN; num_groups],
        }
    }

    /// `(condition, residual, ok)` rows in a fixed order.
    pub fn rows(&self) -> [(&'static str, f64, bool); 5] {
        [
            ("primal_feasibility", self.primal_residual, self.primal_ok),
            ("dual_feasibility", self.dual_residual, self.dual_ok),
            ("complementary_slackness", self.slackness_residual, self.slackness_ok),
            ("lagrangian_optimality", self.lagrangian_residual, self.lagrangian_ok),
            ("strict_separator", self.separator_residual, self.separator_ok),
        ]
    }
}

/// KKT conditions of the relaxed problem started at `y0`, for a candidate
/// occupancy `x` and multipliers `(lambda, mu)`.
///
/// Lagrangian optimality holds iff `x` is supported only on actions that are
/// optimal for the penalized arm at `(lambda, mu_n)`; its residual is the
/// largest Q-value shortfall among supported `(n, s, a)`.
pub fn verify_kkt(
    system: &SystemSpec,
    y0: &[Vec<f64>],
    x: &[Vec<[f64; 2]>],
    lambda: f64,
    mu: &[f64],
) -> Result<KktReport> {
    check_state_shape(system, y0)?;
    let base = system.base_system();
    if x.len() != base.num_arms() || mu.len() != base.num_arms() {
        return Err(Error::InvalidArgument(
            "occupancy or multiplier shape does not match the system groups".into(),
        ));
    }
    let beta = base.discount;

    let mut primal: f64 = 0.0;
    let mut active = 0.0;
    let mut slack_penalty = Vec::with_capacity(base.num_arms());
    for (n, arm) in base.arms.iter().enumerate() {
        if x[n].len() != arm.num_states() {
            return Err(Error::InvalidArgument(format!(
                "occupancy row {n} has the wrong length"
            )));
        }
        let mut inflow = vec![0.0; arm.num_states()];
        let mut pen = 0.0;
        for (s, xs) in x[n].iter().enumerate() {
            for a in 0..2 {
                primal = primal.max(-xs[a]);
                pen += arm.penalty(s, a) * xs[a];
                for (to, p) in arm.kernel_row(s, a).iter().enumerate() {
                    inflow[to] += beta * p * xs[a];
                }
            }
            active += xs[1];
        }
        for s in 0..arm.num_states() {
            let flow = x[n][s][0] + x[n][s][1] - inflow[s];
            primal = primal.max((flow - y0[n][s]).abs());
        }
        let slack = arm.budget() / (1.0 - beta) - pen;
        primal = primal.max(-slack);
        slack_penalty.push(slack);
    }
    let slack_capacity = base.capacity as f64 / (1.0 - beta) - active;
    primal = primal.max(-slack_capacity);

    let dual = mu.iter().fold((-lambda).max(0.0), |r, &m| r.max(-m));
    let mut slackness = (lambda * slack_capacity).abs();
    for (m, s) in mu.iter().zip(&slack_penalty) {
        slackness = slackness.max((m * s).abs());
    }

    let mut lagrangian: f64 = 0.0;
    for (n, arm) in base.arms.iter().enumerate() {
        let vf = policy_iteration(arm, lambda, mu[n], beta, vec![false; arm.num_states()])?;
        let q = q_values(arm, lambda, mu[n], beta, &vf.values);
        for (s, xs) in x[n].iter().enumerate() {
            let best = q[s][0].max(q[s][1]);
            for a in 0..2 {
                if xs[a] > KKT_TOLERANCE {
                    lagrangian = lagrangian.max(best - q[s][a]);
                }
            }
        }
    }

    Ok(KktReport {
        primal_ok: primal <= KKT_TOLERANCE,
        primal_residual: primal,
        dual_ok: dual <= KKT_TOLERANCE,
        dual_residual: dual,
        slackness_ok: slackness <= KKT_TOLERANCE,
        slackness_residual: slackness,
        lagrangian_ok: lagrangian <= KKT_TOLERANCE,
        lagrangian_residual: lagrangian,
        separator_ok: true,
        separator_residual: 0.0,
        lambda,
        mu: mu.to_vec(),
    })
}

/// KKT check of a relaxed solution against its own multipliers.
pub fn verify_fluid_solution(system: &SystemSpec, y0: &FluidState, sol: &FluidSolution) -> Result<KktReport> {
    verify_kkt(system, &y0.y, &sol.x, sol.lambda_star, &sol.mu_star)
}

/// Open interval of prices `(low, high)` separating the supported states
/// with index above the price, whose mass is `C`, from the rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separator {
    pub low: f64,
    pub high: f64,
    pub residual: f64,
}

/// Finds the strict index separator of `y`, if one exists within
/// `tolerance`. Only states carrying mass above `1e-12` are considered.
pub fn find_separator(
    tables: &[IndexTable],
    y: &[Vec<f64>],
    capacity: f64,
    tolerance: f64,
) -> std::result::Result<Separator, f64> {
    let mut mass: Vec<(f64, f64)> = y
        .iter()
        .enumerate()
        .flat_map(|(n, row)| row.iter().enumerate().map(move |(s, &m)| (tables[n].index[s], m)))
        .filter(|&(_, m)| m > 1e-12)
        .collect();
    mass.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best_residual = f64::INFINITY;
    let mut above = 0.0;
    let mut i = 0;
    while i < mass.len() {
        let level = mass[i].0;
        while i < mass.len() && mass[i].0 == level {
            above += mass[i].1;
            i += 1;
        }
        let residual = (above - capacity).abs();
        best_residual = best_residual.min(residual);
        if residual <= tolerance {
            let low = if i < mass.len() { mass[i].0 } else { f64::NEG_INFINITY };
            return Ok(Separator {
                low,
                high: level,
                residual,
            });
        }
    }
    Err(best_residual)
}

/// Certificate that the index policy's fluid attractor solves the relaxed
/// problem started from that attractor.
///
/// The occupancy is `z / (1 - beta)`, the capacity price is taken inside the
/// separator gap, and `mu_n = mu_n*(lambda)` for the arm started from the
/// attractor row. Candidate prices are scanned across the gap and the first
/// passing one is reported, or the last tried if none pass.
pub fn certify_attractor(
    system: &SystemSpec,
    tables: &[IndexTable],
    attractor: &FluidState,
    mu_cap: f64,
) -> Result<KktReport> {
    check_state_shape(system, &attractor.y)?;
    let base = system.base_system();
    let sep = match find_separator(tables, &attractor.y, base.capacity as f64, KKT_TOLERANCE) {
        Ok(sep) => sep,
        Err(residual) => return Ok(KktReport::failed_separator(residual, base.num_arms())),
    };
    let beta = base.discount;
    let x: Vec<Vec<[f64; 2]>> = attractor
        .z
        .iter()
        .map(|row| row.iter().map(|z| [z[0] / (1.0 - beta), z[1] / (1.0 - beta)]).collect())
        .collect();
    let low = sep.low.max(0.0);
    if !(low < sep.high) {
        return Ok(KktReport::failed_separator(sep.residual, base.num_arms()));
    }
    const CANDIDATES: usize = 64;
    let mut last = None;
    for k in 1..=CANDIDATES {
        let lambda = low + (sep.high - low) * k as f64 / (CANDIDATES + 1) as f64;
        let mut mu = Vec::with_capacity(base.num_arms());
        for (arm, y) in base.arms.iter().zip(&attractor.y) {
            let started = arm.with_init_dist(y.clone())?;
            mu.push(solve_dual_mu_lp(&started, lambda, beta, mu_cap)?.mu_star);
        }
        let mut report = verify_kkt(system, &attractor.y, &x, lambda, &mu)?;
        report.separator_residual = sep.residual;
        if report.all_ok() {
            return Ok(report);
        }
        last = Some(report);
    }
    Ok(last.expect("at least one candidate price"))
}

/// Optimal discounted reward of the joint system over randomized stationary
/// policies that activate at most `C` arms per step and meet every arm's
/// discounted penalty budget. Randomization makes this an upper bound on the
/// best deterministic schedule.
pub fn solve_exact_joint(system: &SystemSpec) -> Result<f64> {
    let arms = &system.arms;
    let sizes: Vec<usize> = arms.iter().map(|a| a.num_states()).collect();
    let mut joint = 1usize;
    for &s in &sizes {
        joint = joint.saturating_mul(s);
        if joint > JOINT_STATE_LIMIT {
            return Err(Error::SizeGuard {
                size: joint,
                limit: JOINT_STATE_LIMIT,
            });
        }
    }
    let n = arms.len();
    let beta = system.discount;
    let actions: Vec<Vec<bool>> = (0u64..(1u64 << n))
        .filter(|m| (m.count_ones() as usize) <= system.capacity)
        .map(|m| (0..n).map(|i| m >> i & 1 == 1).collect())
        .collect();
    let decode = |mut js: usize| -> Vec<usize> {
        let mut s = vec![0; n];
        for i in (0..n).rev() {
            s[i] = js % sizes[i];
            js /= sizes[i];
        }
        s
    };
    let na = actions.len();
    let mut objective = vec![0.0; joint * na];
    let mut flow: Vec<Vec<(usize, f64)>> = (0..joint)
        .map(|js| (0..na).map(|k| (js * na + k, 1.0)).collect())
        .collect();
    let mut penalty: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for js in 0..joint {
        let states = decode(js);
        for (k, act) in actions.iter().enumerate() {
            let col = js * na + k;
            objective[col] = (0..n).map(|i| arms[i].reward(states[i], act[i] as usize)).sum();
            for i in 0..n {
                let g = arms[i].penalty(states[i], act[i] as usize);
                if g != 0.0 {
                    penalty[i].push((col, g));
                }
            }
            // joint transition = product of per-arm transitions
            let mut dist = vec![(0usize, 1.0)];
            for i in 0..n {
                let row = arms[i].kernel_row(states[i], act[i] as usize);
                let mut next = Vec::with_capacity(dist.len() * row.len());
                for &(idx, p) in &dist {
                    for (t, &q) in row.iter().enumerate() {
                        if q != 0.0 {
                            next.push((idx * sizes[i] + t, p * q));
                        }
                    }
                }
                dist = next;
            }
            for (to, p) in dist {
                flow[to].push((col, -beta * p));
            }
        }
    }
    let mut lp = LpProblem::new(Sense::Maximize, objective);
    for (js, coeffs) in flow.into_iter().enumerate() {
        let states = decode(js);
        let alpha: f64 = (0..n).map(|i| arms[i].init_dist()[states[i]]).product();
        lp.add_constraint(coeffs, Relation::Eq, alpha);
    }
    for (i, coeffs) in penalty.into_iter().enumerate() {
        lp.add_constraint(coeffs, Relation::Le, arms[i].budget() / (1.0 - beta));
    }
    let sol = solve_lp(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Solver {
            status: sol.status,
            context: "solving the exact joint problem".into(),
        });
    }
    Ok(sol.objective)
}

/// `config_hash,objective,per_step_value,lambda_star,group,mu_star,overflow`,
/// one row per group.
pub fn write_fluid_csv<W: Write>(out: W, config_hash: &str, sol: &FluidSolution, beta: f64) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "config_hash",
        "objective",
        "per_step_value",
        "lambda_star",
        "group",
        "mu_star",
        "overflow",
    ])?;
    for (n, (mu, over)) in sol.mu_star.iter().zip(&sol.overflow).enumerate() {
        w.write_record([
            config_hash.to_string(),
            sol.objective.to_string(),
            sol.per_step_value(beta).to_string(),
            sol.lambda_star.to_string(),
            n.to_string(),
            mu.to_string(),
            over.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `config_hash,condition,residual,ok`, plus the multipliers used.
pub fn write_kkt_csv<W: Write>(out: W, config_hash: &str, report: &KktReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config_hash", "condition", "residual", "ok"])?;
    for (name, residual, ok) in report.rows() {
        w.write_record([config_hash, name, &residual.to_string(), &ok.to_string()])?;
    }
    w.write_record([config_hash, "lambda", &report.lambda.to_string(), ""])?;
    for (n, mu) in report.mu.iter().enumerate() {
        w.write_record([config_hash, &format!("mu_{n}"), &mu.to_string(), ""])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::value_iteration;
    use crate::index::{pow_index_table_default, Clamp, IndexTable};

    fn table(index: Vec<f64>) -> IndexTable {
        IndexTable {
            clamped: vec![Clamp::None; index.len()],
            index,
            indexable: true,
            search_bound: 10.0,
            resolution: 1e-4,
        }
    }

    fn two_state_arm(r: [f64; 2], p_stay: f64, budget: f64, g_passive: f64) -> ArmModel {
        ArmModel::new(
            vec![[0.0, r[0]], [0.0, r[1]]],
            vec![[g_passive, 0.0], [g_passive, 0.0]],
            vec![p_stay, 1.0 - p_stay, 1.0 - p_stay, p_stay, 0.5, 0.5, 0.5, 0.5],
            budget,
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn slack_constraints_give_unconstrained_values() {
        let arms = vec![
            two_state_arm([1.0, 0.3], 0.7, 5.0, 1.0),
            two_state_arm([0.2, 0.9], 0.4, 5.0, 1.0),
        ];
        let sys = SystemSpec::new(arms.clone(), 2, 0.9).unwrap();
        let sol = solve_fluid_relaxed(&sys, &FluidState::initial(&sys), None).unwrap();
        let expect: f64 = arms
            .iter()
            .map(|a| {
                let vf = value_iteration(a, 0.0, 0.0, 0.9, 1e-12).unwrap();
                a.init_dist().iter().zip(&vf.values).map(|(p, v)| p * v).sum::<f64>()
            })
            .sum();
        assert!((sol.objective - expect).abs() < 1e-8);
        assert!(sol.lambda_star.abs() < 1e-9);
        assert!(sol.mu_star.iter().all(|m| m.abs() < 1e-9));
        let (lambda, value) = minimize_sys_dual(&sys, 5.0, sys_dual_search_bound(&sys, 5.0)).unwrap();
        assert_eq!(lambda, 0.0);
        assert!((value - expect).abs() < 1e-6);
    }

    #[test]
    fn strong_duality_and_price_agreement() {
        let arms = vec![
            two_state_arm([1.0, 0.3], 0.7, 0.6, 1.0),
            two_state_arm([0.2, 0.9], 0.4, 0.7, 1.0),
        ];
        let sys = SystemSpec::new(arms, 1, 0.9).unwrap();
        let y0 = FluidState::initial(&sys);
        let sol = solve_fluid_relaxed(&sys, &y0, Some(5.0)).unwrap();
        assert!(sol.mu_star.iter().all(|&m| m < 5.0));
        let (lambda, value) = minimize_sys_dual(&sys, 5.0, sys_dual_search_bound(&sys, 5.0)).unwrap();
        assert!((value - sol.objective).abs() < 1e-6, "{value} vs {}", sol.objective);
        for l in [0.0, 0.1, 0.5, 2.0] {
            assert!(sys_dual_value(&sys, l, 5.0).unwrap() >= sol.objective - 1e-8);
        }
        let at_lp = sys_dual_value(&sys, sol.lambda_star, 5.0).unwrap();
        assert!((at_lp - value).abs() < 1e-6);
        assert!(lambda >= 0.0);
        let report = verify_fluid_solution(&sys, &y0, &sol).unwrap();
        assert!(report.all_ok(), "{report:?}");
    }

    #[test]
    fn perturbed_binding_coordinate_breaks_slackness() {
        let arms = vec![
            two_state_arm([1.0, 0.3], 0.7, 0.6, 1.0),
            two_state_arm([0.2, 0.9], 0.4, 0.7, 1.0),
        ];
        let sys = SystemSpec::new(arms, 1, 0.9).unwrap();
        let y0 = FluidState::initial(&sys);
        let sol = solve_fluid_relaxed(&sys, &y0, None).unwrap();
        assert!(sol.lambda_star > 1e-3);
        let mut x = sol.x.clone();
        let (n, s) = (0..2)
            .flat_map(|n| (0..2).map(move |s| (n, s)))
            .find(|&(n, s)| sol.x[n][s][1] > 1e-6)
            .unwrap();
        x[n][s][1] -= 0.01;
        let r = verify_kkt(&sys, &y0.y, &x, sol.lambda_star, &sol.mu_star).unwrap();
        assert!(!r.slackness_ok);
    }

    #[test]
    fn water_filling() {
        let tables = vec![table(vec![3.0, -1.0, 1.0]), table(vec![2.0, 0.5])];
        let y = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.4]];
        let st = fluid_index_step(&tables, &y, 0.5);
        assert!((st.z[0][0][1] - 0.2).abs() < 1e-15);
        assert!((st.z[1][0][1] - 0.3).abs() < 1e-15);
        assert_eq!(st.z[0][2][1], 0.0);
        assert!(st.invariant_residual() < 1e-15);

        let all = fluid_index_step(&tables, &y, 10.0);
        let positive = 0.2 + 0.3 + 0.6 + 0.4;
        assert!((all.active_mass() - positive).abs() < 1e-15);
        assert_eq!(all.z[0][1][1], 0.0);

        let none = fluid_index_step(&tables, &y, 0.0);
        assert_eq!(none.active_mass(), 0.0);
    }

    #[test]
    fn water_filling_matches_lp() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let tables: Vec<IndexTable> = (0..3)
                .map(|_| table((0..4).map(|_| rng.random_range(-1.0..2.0)).collect()))
                .collect();
            let y: Vec<Vec<f64>> = (0..3)
                .map(|_| {
                    let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
                    let t: f64 = w.iter().sum();
                    w.into_iter().map(|v| v / t).collect()
                })
                .collect();
            let cap = rng.random_range(0.2..2.5);
            let st = fluid_index_step(&tables, &y, cap);
            let got: f64 = (0..3)
                .flat_map(|n| (0..4).map(move |s| (n, s)))
                .map(|(n, s)| tables[n].index[s] * st.z[n][s][1])
                .sum();

            let obj: Vec<f64> = tables.iter().flat_map(|t| t.index.clone()).collect();
            let mut lp = LpProblem::new(Sense::Maximize, obj);
            lp.add_constraint((0..12).map(|j| (j, 1.0)).collect(), Relation::Le, cap);
            for n in 0..3 {
                for s in 0..4 {
                    lp.set_upper(4 * n + s, y[n][s]);
                }
            }
            let sol = solve_lp(&lp).unwrap();
            assert!((sol.objective - got).abs() < 1e-9);
            assert!(st.active_mass() <= cap + 1e-12);
        }
    }

    #[test]
    fn absorbing_groups_fix_immediately() {
        let arm = ArmModel::new(vec![[0.0, 1.0]], vec![[0.0, 0.0]], vec![1.0, 1.0], 1.0, vec![1.0]).unwrap();
        let sys = SystemSpec::new(vec![arm.clone(), arm], 1, 0.9).unwrap();
        let tables = vec![table(vec![1.0]), table(vec![0.5])];
        let tr = fluid_trajectory(&sys, &tables, &FluidState::initial(&sys), 10).unwrap();
        assert_eq!(tr.converged_at, Some(1));
        assert_eq!(tr.states.len(), 2);
        assert_eq!(tr.attractor().unwrap().z[0][0][1], 1.0);
    }

    /// Two identical groups with a ready/rested cycle: serving a ready arm
    /// rests it for one step. Started half ready, the fluid system sits at a
    /// fixed point with exactly mass `C = 1` on the ready states.
    fn ready_rested_system() -> SystemSpec {
        let arm = ArmModel::new(
            vec![[0.0, 0.0], [0.0, 1.0]],
            vec![[0.0, 0.0], [1.0, 0.0]],
            // state 0 rested, state 1 ready; passive: 0 -> 1, 1 -> 1; active: -> 0
            vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0],
            0.9,
            vec![0.5, 0.5],
        )
        .unwrap();
        SystemSpec::new(vec![arm.clone(), arm], 1, 0.95).unwrap()
    }

    #[test]
    fn attractor_certificate_on_cyclic_instance() {
        let sys = ready_rested_system();
        let tables: Vec<IndexTable> = sys
            .arms
            .iter()
            .map(|a| pow_index_table_default(a, sys.discount, 5.0, 1e-6).unwrap())
            .collect();
        let tr = fluid_trajectory(&sys, &tables, &FluidState::initial(&sys), 10_000).unwrap();
        let att = tr.attractor().expect("converges");
        assert!(att.invariant_residual() < 1e-12);
        let report = certify_attractor(&sys, &tables, att, 5.0).unwrap();
        assert!(report.all_ok(), "{report:?}");
    }

    #[test]
    fn missing_separator_is_reported() {
        let tables = vec![table(vec![1.0, 2.0])];
        assert!(find_separator(&tables, &[vec![0.5, 0.5]], 0.7, 1e-6).is_err());
        let sep = find_separator(&tables, &[vec![0.3, 0.7]], 0.7, 1e-6).unwrap();
        assert_eq!((sep.low, sep.high), (1.0, 2.0));
    }

    #[test]
    fn exact_single_arm_matches_value_iteration() {
        let arm = two_state_arm([1.0, 0.3], 0.7, 100.0, 1.0);
        let sys = SystemSpec::new(vec![arm.clone()], 1, 0.9).unwrap();
        let exact = solve_exact_joint(&sys).unwrap();
        let vf = value_iteration(&arm, 0.0, 0.0, 0.9, 1e-12).unwrap();
        let v: f64 = arm.init_dist().iter().zip(&vf.values).map(|(p, v)| p * v).sum();
        assert!((exact - v).abs() < 1e-8);
    }

    #[test]
    fn exact_is_dominated_by_relaxation() {
        let arms = vec![
            two_state_arm([1.0, 0.3], 0.7, 0.6, 1.0),
            two_state_arm([0.2, 0.9], 0.4, 0.7, 1.0),
        ];
        let sys = SystemSpec::new(arms, 1, 0.9).unwrap();
        let exact = solve_exact_joint(&sys).unwrap();
        let fluid = solve_fluid_relaxed(&sys, &FluidState::initial(&sys), None).unwrap();
        assert!(exact <= fluid.objective + 1e-8);
    }

    #[test]
    fn size_guard() {
        let arm = crate::model::remote_sensing_arm(0.5, 1.0).unwrap();
        let sys = SystemSpec::new(vec![arm.clone(), arm.clone(), arm], 1, 0.99).unwrap();
        assert!(matches!(solve_exact_joint(&sys), Err(Error::SizeGuard { .. })));
    }

    #[test]
    fn csv_reports() {
        let sol = FluidSolution {
            x: vec![],
            objective: 2.0,
            lambda_star: 0.5,
            mu_star: vec![0.0, 1.5],
            overflow: vec![0.0, 0.0],
        };
        let mut buf = Vec::new();
        write_fluid_csv(&mut buf, "h", &sol, 0.9).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().ends_with(",1,1.5,0"));
    }
}
