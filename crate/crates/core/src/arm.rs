//! Single-arm penalized MDP: for an activation price `lambda` and penalty
//! multiplier `mu` the arm earns `r(s,a) - lambda a - mu g(s,a)` per step.
//!
//! The optimal multiplier `mu*(lambda)` minimizes the arm Lagrangian
//! `L(lambda, mu) = sum_s alpha(s) v(s) + mu B / (1 - beta)` over
//! `mu in [0, U]`. It is computed two independent ways: through the
//! occupancy LP (primary) and through golden-section search over value
//! iteration (oracle).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linprog::{solve_lp, LpProblem, LpStatus, Relation, Sense};
use crate::model::ArmModel;

/// Activation wins whenever `Q(s,1) >= Q(s,0) - TIE_TOLERANCE`.
pub const TIE_TOLERANCE: f64 = 1e-8;

/// Bellman tolerance used when the Lagrangian is evaluated by value iteration.
pub const LAGRANGIAN_VI_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub values: Vec<f64>,
    pub activate: Vec<bool>,
    pub lambda: f64,
    pub mu: f64,
}

impl ValueFunction {
    pub fn bellman_residual(&self, arm: &ArmModel, beta: f64) -> f64 {
        bellman_residual(arm, self.lambda, self.mu, beta, &self.values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub mu_star: f64,
    pub value_fn: ValueFunction,
    pub dual_objective: f64,
}

fn check_discount(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("discount {beta} must lie in (0,1)")))
    }
}

#[inline]
pub fn penalized_reward(arm: &ArmModel, lambda: f64, mu: f64, s: usize, a: usize) -> f64 {
    arm.reward(s, a) - lambda * a as f64 - mu * arm.penalty(s, a)
}

/// `Q(s,a)` for both actions given a value vector.
pub fn q_values(arm: &ArmModel, lambda: f64, mu: f64, beta: f64, values: &[f64]) -> Vec<[f64; 2]> {
    (0..arm.num_states())
        .map(|s| {
            let mut q = [0.0; 2];
            for (a, qa) in q.iter_mut().enumerate() {
                let future: f64 = arm.kernel_row(s, a).iter().zip(values).map(|(p, v)| p * v).sum();
                *qa = penalized_reward(arm, lambda, mu, s, a) + beta * future;
            }
            q
        })
        .collect()
}

/// Sup-norm gap between `values` and one Bellman backup of it.
pub fn bellman_residual(arm: &ArmModel, lambda: f64, mu: f64, beta: f64, values: &[f64]) -> f64 {
    q_values(arm, lambda, mu, beta, values)
        .iter()
        .zip(values)
        .map(|(q, v)| (q[0].max(q[1]) - v).abs())
        .fold(0.0, f64::max)
}

/// Greedy actions with ties resolved toward activation.
pub fn extract_policy(arm: &ArmModel, lambda: f64, mu: f64, beta: f64, values: &[f64]) -> Vec<bool> {
    q_values(arm, lambda, mu, beta, values)
        .iter()
        .map(|q| q[1] >= q[0] - TIE_TOLERANCE)
        .collect()
}

/// Iterates the Bellman operator until the successive-iterate gap drops
/// below `tol (1 - beta) / (2 beta)`, which bounds the residual by `tol`.
pub fn value_iteration(arm: &ArmModel, lambda: f64, mu: f64, beta: f64, tol: f64) -> Result<ValueFunction> {
    check_discount(beta)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    if !(lambda.is_finite() && mu.is_finite()) {
        return Err(Error::NonFinite("value_iteration inputs"));
    }
    let n = arm.num_states();
    let stop = tol * (1.0 - beta) / (2.0 * beta);
    let mut values = vec![0.0; n];
    let mut next = vec![0.0; n];
    loop {
        let mut gap: f64 = 0.0;
        for (s, out) in next.iter_mut().enumerate() {
            let mut best = f64::NEG_INFINITY;
            for a in 0..2 {
                let future: f64 = arm.kernel_row(s, a).iter().zip(&values).map(|(p, v)| p * v).sum();
                best = best.max(penalized_reward(arm, lambda, mu, s, a) + beta * future);
            }
            gap = gap.max((best - values[s]).abs());
            *out = best;
        }
        std::mem::swap(&mut values, &mut next);
        if !gap.is_finite() {
            return Err(Error::NonFinite("value_iteration"));
        }
        if gap <= stop {
            break;
        }
    }
    let activate = extract_policy(arm, lambda, mu, beta, &values);
    Ok(ValueFunction {
        values,
        activate,
        lambda,
        mu,
    })
}

/// Exact value of a stationary deterministic policy.
pub fn evaluate_policy(arm: &ArmModel, lambda: f64, mu: f64, beta: f64, policy: &[bool]) -> Result<Vec<f64>> {
    let n = arm.num_states();
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for s in 0..n {
        let a = policy[s] as usize;
        for (t, p) in arm.kernel_row(s, a).iter().enumerate() {
            m[(s, t)] -= beta * p;
        }
        rhs[s] = penalized_reward(arm, lambda, mu, s, a);
    }
    let v = m
        .lu()
        .solve(&rhs)
        .ok_or(Error::NonFinite("policy evaluation (singular system)"))?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("policy evaluation"));
    }
    Ok(v.iter().copied().collect())
}

/// Policy iteration from `start`; switches an action only on strict
/// improvement, so it terminates.
pub fn policy_iteration(arm: &ArmModel, lambda: f64, mu: f64, beta: f64, start: Vec<bool>) -> Result<ValueFunction> {
    check_discount(beta)?;
    let mut policy = start;
    let mut values;
    let mut rounds = 0;
    loop {
        values = evaluate_policy(arm, lambda, mu, beta, &policy)?;
        let q = q_values(arm, lambda, mu, beta, &values);
        let mut changed = false;
        for (s, qs) in q.iter().enumerate() {
            let cur = policy[s] as usize;
            let other = 1 - cur;
            if qs[other] > qs[cur] + 1e-12 * (1.0 + qs[cur].abs()) {
                policy[s] = other == 1;
                changed = true;
            }
        }
        rounds += 1;
        if !changed || rounds > 10 * arm.num_states() + 100 {
            break;
        }
    }
    let activate = extract_policy(arm, lambda, mu, beta, &values);
    Ok(ValueFunction {
        values,
        activate,
        lambda,
        mu,
    })
}

/// `L(lambda, mu) = sum_s alpha(s) v(s) + mu B / (1 - beta)` with `v` from
/// value iteration.
pub fn arm_lagrangian_value(arm: &ArmModel, lambda: f64, mu: f64, beta: f64) -> Result<f64> {
    let vf = value_iteration(arm, lambda, mu, beta, LAGRANGIAN_VI_TOL)?;
    Ok(lagrangian_from_values(arm, mu, beta, &vf.values))
}

pub fn lagrangian_from_values(arm: &ArmModel, mu: f64, beta: f64, values: &[f64]) -> f64 {
    let start: f64 = arm.init_dist().iter().zip(values).map(|(a, v)| a * v).sum();
    start + mu * arm.budget() / (1.0 - beta)
}

/// Occupancy-measure form of the arm problem at price `lambda`. Its row
/// duals are the value function (flow rows) and the multiplier (penalty
/// row); `mu_cap` caps the multiplier through the cost of the overflow
/// variable `w`.
///
/// Variables: `x(s,a)` at `2s + a`, then `w`.
pub fn arm_occupancy_lp(arm: &ArmModel, lambda: f64, beta: f64, mu_cap: f64) -> LpProblem {
    let n = arm.num_states();
    let mut objective: Vec<f64> = (0..n)
        .flat_map(|s| [arm.reward(s, 0), arm.reward(s, 1) - lambda])
        .collect();
    objective.push(-mu_cap);
    let mut lp = LpProblem::new(Sense::Maximize, objective);
    let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|s| vec![(2 * s, 1.0), (2 * s + 1, 1.0)]).collect();
    for from in 0..n {
        for a in 0..2 {
            for (to, &p) in arm.kernel_row(from, a).iter().enumerate() {
                if p != 0.0 {
                    rows[to].push((2 * from + a, -beta * p));
                }
            }
        }
    }
    for (s, coeffs) in rows.into_iter().enumerate() {
        lp.add_constraint(coeffs, Relation::Eq, arm.init_dist()[s]);
    }
    let mut pen: Vec<(usize, f64)> = (0..n)
        .flat_map(|s| [(2 * s, arm.penalty(s, 0)), (2 * s + 1, arm.penalty(s, 1))])
        .filter(|&(_, g)| g != 0.0)
        .collect();
    pen.push((2 * n, -1.0));
    lp.add_constraint(pen, Relation::Le, arm.budget() / (1.0 - beta));
    lp
}

pub(crate) fn solve_penalized_arm(arm: &ArmModel, lambda: f64, beta: f64, mu_cap: f64) -> Result<DualSolution> {
    check_discount(beta)?;
    if !lambda.is_finite() {
        return Err(Error::NonFinite("activation price"));
    }
    let n = arm.num_states();
    let lp = arm_occupancy_lp(arm, lambda, beta, mu_cap);
    let sol = solve_lp(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Solver {
            status: sol.status,
            context: format!("solving the arm dual at lambda = {lambda}"),
        });
    }
    let mu = sol.dual[n].clamp(0.0, mu_cap);
    let lp_values = &sol.dual[..n];
    // LP duals pin v only where the occupancy is supported; polish to the
    // exact Bellman fixed point at (lambda, mu).
    let start = extract_policy(arm, lambda, mu, beta, lp_values);
    let value_fn = policy_iteration(arm, lambda, mu, beta, start)?;
    Ok(DualSolution {
        mu_star: mu,
        value_fn,
        dual_objective: sol.objective,
    })
}

/// `mu*(lambda)` and the value function at `(lambda, mu*)` via the LP.
pub fn solve_dual_mu_lp(arm: &ArmModel, lambda: f64, beta: f64, mu_cap: f64) -> Result<DualSolution> {
    if !(mu_cap > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "multiplier cap {mu_cap} must be positive"
        )));
    }
    solve_penalized_arm(arm, lambda, beta, mu_cap)
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// `mu*(lambda)` by golden-section search of the convex piecewise-linear
/// Lagrangian, refined on a local grid and then pulled to the smallest
/// minimizer.
pub fn solve_dual_mu_search(arm: &ArmModel, lambda: f64, beta: f64, mu_cap: f64) -> Result<DualSolution> {
    check_discount(beta)?;
    if !(mu_cap > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "multiplier cap {mu_cap} must be positive"
        )));
    }
    let f = |mu: f64| arm_lagrangian_value(arm, lambda, mu, beta);

    let (mut a, mut b) = (0.0, mu_cap);
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > 1e-10 * mu_cap.max(1.0) {
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

    let width = (b - a).max(1e-9);
    let lo = (a - 4.0 * width).max(0.0);
    let hi = (b + 4.0 * width).min(mu_cap);
    let mut candidates: Vec<f64> = (0..=20).map(|i| lo + (hi - lo) * i as f64 / 20.0).collect();
    candidates.extend([0.0, mu_cap, c, d]);
    let mut best = (f64::INFINITY, f64::INFINITY);
    for mu in candidates {
        let v = f(mu)?;
        if v < best.1 - 1e-12 || (v <= best.1 + 1e-12 && mu < best.0) {
            best = (mu, v);
        }
    }

    let (mut mu_best, f_best) = best;
    let slack = 1e-9 * (1.0 + f_best.abs());
    if mu_best > 0.0 {
        if f(0.0)? <= f_best + slack {
            mu_best = 0.0;
        } else {
            let (mut left, mut right) = (0.0, mu_best);
            for _ in 0..48 {
                let mid = 0.5 * (left + right);
                if f(mid)? <= f_best + slack {
                    right = mid;
                } else {
                    left = mid;
                }
            }
            mu_best = right;
        }
    }

    let value_fn = value_iteration(arm, lambda, mu_best, beta, LAGRANGIAN_VI_TOL)?;
    let dual_objective = lagrangian_from_values(arm, mu_best, beta, &value_fn.values);
    Ok(DualSolution {
        mu_star: mu_best,
        value_fn,
        dual_objective,
    })
}

/// Expected discounted penalty of a stationary policy from `alpha`.
pub fn discounted_penalty(arm: &ArmModel, beta: f64, policy: &[bool]) -> Result<f64> {
    let n = arm.num_states();
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for s in 0..n {
        let a = policy[s] as usize;
        for (t, p) in arm.kernel_row(s, a).iter().enumerate() {
            m[(s, t)] -= beta * p;
        }
        rhs[s] = arm.penalty(s, a);
    }
    let v = m.lu().solve(&rhs).ok_or(Error::NonFinite("penalty evaluation"))?;
    Ok(arm.init_dist().iter().zip(v.iter()).map(|(a, v)| a * v).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::throughput_arm;

    fn single_state(r0: f64, r1: f64, g: f64, budget: f64) -> ArmModel {
        ArmModel::new(vec![[r0, r1]], vec![[g, g]], vec![1.0, 1.0], budget, vec![1.0]).unwrap()
    }

    #[test]
    fn geometric_series_value() {
        let arm = single_state(1.0, 1.0, 0.0, 0.0);
        let vf = value_iteration(&arm, 0.0, 0.0, 0.5, 1e-12).unwrap();
        assert!((vf.values[0] - 2.0).abs() < 1e-10);
        assert!(vf.activate[0]);
    }

    #[test]
    fn myopic_limit_prefers_passive() {
        let arm = single_state(0.0, 1.0, 0.0, 0.0);
        let vf = value_iteration(&arm, 2.0, 0.0, 1e-9, 1e-12).unwrap();
        assert!(vf.values[0].abs() < 1e-6);
        assert!(!vf.activate[0]);
    }

    #[test]
    fn value_iteration_rejects_bad_arguments() {
        let arm = single_state(1.0, 1.0, 0.0, 0.0);
        assert!(value_iteration(&arm, 0.0, 0.0, 1.0, 1e-8).is_err());
        assert!(value_iteration(&arm, 0.0, 0.0, 0.5, 0.0).is_err());
        assert!(value_iteration(&arm, f64::NAN, 0.0, 0.5, 1e-8).is_err());
    }

    #[test]
    fn lagrangian_budget_term() {
        let arm = single_state(1.0, 1.0, 0.0, 0.5);
        let l0 = arm_lagrangian_value(&arm, 0.0, 0.0, 0.5).unwrap();
        assert!((l0 - 2.0).abs() < 1e-9);
        let l1 = arm_lagrangian_value(&arm, 0.0, 1.0, 0.5).unwrap();
        assert!((l1 - 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_penalty_gives_zero_multiplier() {
        let mut arm = throughput_arm(0.3, 0.02, 0.5).unwrap();
        arm = ArmModel::new(
            arm.rewards().to_vec(),
            vec![[0.0, 0.0]; 50],
            arm.kernel().to_vec(),
            0.5,
            arm.init_dist().to_vec(),
        )
        .unwrap();
        for lambda in [-1.0, 0.5, 3.0] {
            let lp = solve_dual_mu_lp(&arm, lambda, 0.9, 5.0).unwrap();
            assert_eq!(lp.mu_star, 0.0);
            let search = solve_dual_mu_search(&arm, lambda, 0.9, 5.0).unwrap();
            assert_eq!(search.mu_star, 0.0);
        }
    }

    #[test]
    fn loose_activation_budget_gives_zero_multiplier() {
        // g = a with B = 1: discounted penalty never exceeds B / (1 - beta)
        let arm = ArmModel::new(
            vec![[0.0, 1.0], [0.2, 0.5]],
            vec![[0.0, 1.0], [0.0, 1.0]],
            vec![0.5, 0.5, 0.1, 0.9, 0.3, 0.7, 0.6, 0.4],
            1.0,
            vec![0.5, 0.5],
        )
        .unwrap();
        for lambda in [-2.0, 0.0, 0.3, 2.0] {
            assert_eq!(solve_dual_mu_lp(&arm, lambda, 0.9, 5.0).unwrap().mu_star, 0.0);
        }
    }

    #[test]
    fn extraction_ties_favor_activation() {
        let arm = single_state(0.0, 1.0, 0.0, 0.0);
        // at lambda = 1 both actions earn 0
        let v = vec![0.0];
        assert_eq!(extract_policy(&arm, 1.0, 0.0, 0.5, &v), vec![true]);
        assert_eq!(extract_policy(&arm, 1.0 + 1e-6, 0.0, 0.5, &v), vec![false]);
    }

    #[test]
    fn expensive_activation_is_never_chosen() {
        let arm = throughput_arm(0.3, 0.02, 0.0).unwrap();
        let arm = arm.with_budget(100.0);
        // action-independent kernel: span term cancels, threshold is r(s,1) + mu
        let sol = solve_dual_mu_lp(&arm, 2.0, 0.9, 5.0).unwrap();
        assert!(sol.value_fn.activate.iter().all(|a| !a));
    }

    #[test]
    fn lp_value_function_satisfies_bellman() {
        let cfg = crate::model::ScenarioConfig::benchmark(crate::model::ScenarioKind::RemoteSensing, 4).unwrap();
        let sys = crate::model::make_scenario(&cfg).unwrap();
        for arm in &sys.arms {
            for lambda in [-3.0, 0.0, 0.4, 2.0] {
                let sol = solve_dual_mu_lp(arm, lambda, 0.99, 10.0).unwrap();
                assert!(sol.value_fn.bellman_residual(arm, 0.99) < 1e-8);
                let l = lagrangian_from_values(arm, sol.mu_star, 0.99, &sol.value_fn.values);
                assert!((l - sol.dual_objective).abs() < 1e-6, "{l} vs {}", sol.dual_objective);
            }
        }
    }
}
