//! Penalty-optimal Whittle (POW) indices and indexability checks.
//!
//! The index of state `s` is the largest activation price `lambda` at which
//! `s` is still activated by the optimal policy of the penalized arm with
//! the multiplier re-optimized as `mu*(lambda)`. Whittle indices are the
//! same search with the multiplier pinned at zero.

use std::io::Write;

use crate::arm::solve_penalized_arm;
use crate::error::{Error, Result};
use crate::model::ArmModel;

pub const DEFAULT_RESOLUTION: f64 = 1e-4;
pub const COARSE_GRID_POINTS: usize = 200;
pub const FINE_GRID_POINTS: usize = 2000;

/// Which multiplier rule the activation oracle uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IndexRule {
    /// `mu = mu*(lambda)` in `[0, cap]`.
    PenaltyOptimal { mu_cap: f64 },
    /// `mu = 0`.
    Whittle,
}

impl IndexRule {
    fn mu_cap(&self) -> f64 {
        match self {
            IndexRule::PenaltyOptimal { mu_cap } => *mu_cap,
            IndexRule::Whittle => 0.0,
        }
    }
}

/// Activation set of the penalized arm at price `lambda`.
pub fn activation_set(arm: &ArmModel, lambda: f64, beta: f64, rule: IndexRule) -> Result<Vec<bool>> {
    Ok(solve_penalized_arm(arm, lambda, beta, rule.mu_cap())?.value_fn.activate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clamp {
    None,
    /// Active at `+M`: the true index is `+M` or beyond.
    Upper,
    /// Never active on `[-M, M]`.
    Lower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexTable {
    pub index: Vec<f64>,
    pub clamped: Vec<Clamp>,
    pub indexable: bool,
    pub search_bound: f64,
    pub resolution: f64,
}

impl IndexTable {
    pub fn num_states(&self) -> usize {
        self.index.len()
    }

    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|c| *c != Clamp::None)
    }
}

/// `(r_max - r_min)/(1-beta) + U g_max/(1-beta) + 1`.
pub fn default_search_bound(arm: &ArmModel, beta: f64, mu_cap: f64) -> f64 {
    let (lo, hi) = arm.reward_range();
    (hi - lo) / (1.0 - beta) + mu_cap * arm.max_penalty() / (1.0 - beta) + 1.0
}

/// `points` evenly spaced values on `[-bound, bound]`.
pub fn lambda_grid(bound: f64, points: usize) -> Vec<f64> {
    let points = points.max(2);
    (0..points)
        .map(|i| -bound + 2.0 * bound * i as f64 / (points - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexViolation {
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub state: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexabilityReport {
    pub indexable: bool,
    pub violations: Vec<IndexViolation>,
    pub grid: Vec<f64>,
    /// `activation[i][s]` at `grid[i]`
    pub activation: Vec<Vec<bool>>,
}

/// Nestedness check on precomputed activation sets along an ascending grid.
/// A violation is a state inactive at `grid[i]` but active again at a later
/// `grid[j]`; `i` is the last inactive point before `j`.
pub fn nestedness_violations(grid: &[f64], activation: &[Vec<bool>]) -> Vec<IndexViolation> {
    let mut out = Vec::new();
    let Some(first) = activation.first() else {
        return out;
    };
    for s in 0..first.len() {
        let mut last_inactive: Option<usize> = None;
        for (j, act) in activation.iter().enumerate() {
            if act[s] {
                if let Some(i) = last_inactive.take() {
                    out.push(IndexViolation {
                        lambda_low: grid[i],
                        lambda_high: grid[j],
                        state: s,
                    });
                }
            } else {
                last_inactive = Some(j);
            }
        }
    }
    out
}

fn activation_on_grid(arm: &ArmModel, beta: f64, rule: IndexRule, grid: &[f64]) -> Result<Vec<Vec<bool>>> {
    grid.iter().map(|&l| activation_set(arm, l, beta, rule)).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(
            "indexability grid must be strictly ascending with at least two points".into(),
        ));
    }
    Ok(())
}

/// Computes POW activation sets on `grid` and reports whether they are
/// nested non-increasing in `lambda`.
pub fn check_indexability(arm: &ArmModel, beta: f64, mu_cap: f64, grid: &[f64]) -> Result<IndexabilityReport> {
    check_indexability_with(arm, beta, IndexRule::PenaltyOptimal { mu_cap }, grid)
}

pub fn check_indexability_with(arm: &ArmModel, beta: f64, rule: IndexRule, grid: &[f64]) -> Result<IndexabilityReport> {
    check_grid(grid)?;
    let activation = activation_on_grid(arm, beta, rule, grid)?;
    let violations = nestedness_violations(grid, &activation);
    Ok(IndexabilityReport {
        indexable: violations.is_empty(),
        violations,
        grid: grid.to_vec(),
        activation,
    })
}

/// Locates each state's switching price inside the grid cell after its last
/// active grid point, sharing one solve per bisection midpoint among all
/// states that fall in the same sub-interval.
fn refine(
    arm: &ArmModel,
    beta: f64,
    rule: IndexRule,
    resolution: f64,
    lo: f64,
    hi: f64,
    states: Vec<usize>,
    index: &mut [f64],
) -> Result<()> {
    let mut stack = vec![(lo, hi, states)];
    while let Some((lo, hi, states)) = stack.pop() {
        if states.is_empty() {
            continue;
        }
        if hi - lo <= resolution {
            for s in states {
                index[s] = 0.5 * (lo + hi);
            }
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let act = activation_set(arm, mid, beta, rule)?;
        let (upper, lower): (Vec<usize>, Vec<usize>) = states.into_iter().partition(|&s| act[s]);
        stack.push((lo, mid, lower));
        stack.push((mid, hi, upper));
    }
    Ok(())
}

pub fn index_table(
    arm: &ArmModel,
    beta: f64,
    rule: IndexRule,
    search_bound: f64,
    resolution: f64,
) -> Result<IndexTable> {
    if !(search_bound > 0.0 && search_bound.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "search bound {search_bound} must be positive"
        )));
    }
    if !(resolution > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "resolution {resolution} must be positive"
        )));
    }
    let n = arm.num_states();
    let mut grid = lambda_grid(search_bound, COARSE_GRID_POINTS);
    let mut activation = activation_on_grid(arm, beta, rule, &grid)?;
    let indexable = nestedness_violations(&grid, &activation).is_empty();
    if !indexable {
        grid = lambda_grid(search_bound, FINE_GRID_POINTS);
        activation = activation_on_grid(arm, beta, rule, &grid)?;
    }

    let mut index = vec![0.0; n];
    let mut clamped = vec![Clamp::None; n];
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); grid.len()];
    for s in 0..n {
        match activation.iter().rposition(|a| a[s]) {
            None => {
                index[s] = -search_bound;
                clamped[s] = Clamp::Lower;
            }
            Some(i) if i + 1 == grid.len() => {
                index[s] = search_bound;
                clamped[s] = Clamp::Upper;
            }
            Some(i) => cells[i].push(s),
        }
    }
    for (i, states) in cells.into_iter().enumerate() {
        if !states.is_empty() {
            refine(arm, beta, rule, resolution, grid[i], grid[i + 1], states, &mut index)?;
        }
    }
    Ok(IndexTable {
        index,
        clamped,
        indexable,
        search_bound,
        resolution,
    })
}

pub fn pow_index_table(
    arm: &ArmModel,
    beta: f64,
    mu_cap: f64,
    search_bound: f64,
    resolution: f64,
) -> Result<IndexTable> {
    if !(mu_cap > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "multiplier cap {mu_cap} must be positive"
        )));
    }
    index_table(
        arm,
        beta,
        IndexRule::PenaltyOptimal { mu_cap },
        search_bound,
        resolution,
    )
}

pub fn whittle_index_table(arm: &ArmModel, beta: f64, search_bound: f64, resolution: f64) -> Result<IndexTable> {
    index_table(arm, beta, IndexRule::Whittle, search_bound, resolution)
}

/// POW table with the default search bound.
pub fn pow_index_table_default(arm: &ArmModel, beta: f64, mu_cap: f64, resolution: f64) -> Result<IndexTable> {
    pow_index_table(arm, beta, mu_cap, default_search_bound(arm, beta, mu_cap), resolution)
}

/// Whittle table with the default search bound (`U = 0`).
pub fn whittle_index_table_default(arm: &ArmModel, beta: f64, resolution: f64) -> Result<IndexTable> {
    whittle_index_table(arm, beta, default_search_bound(arm, beta, 0.0), resolution)
}

/// Writes `config_hash,arm_id,state,index,indexable,clamped` rows.
pub fn write_index_csv<W: Write>(out: W, config_hash: &str, tables: &[IndexTable]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config_hash", "arm_id", "state", "index", "indexable", "clamped"])?;
    for (arm_id, t) in tables.iter().enumerate() {
        for (s, (i, c)) in t.index.iter().zip(&t.clamped).enumerate() {
            let clamp = match c {
                Clamp::None => "none",
                Clamp::Upper => "upper",
                Clamp::Lower => "lower",
            };
            w.write_record([
                config_hash.to_string(),
                arm_id.to_string(),
                s.to_string(),
                i.to_string(),
                t.indexable.to_string(),
                clamp.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
