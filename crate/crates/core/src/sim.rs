//! Seeded Monte-Carlo simulation of (replicated) systems under a policy.
//!
//! Each arm draws from its own ChaCha stream (`stream = arm id`) of the run
//! seed, so the draws of one arm do not depend on how many other arms there
//! are or on what the policy does with its own stream.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::index::IndexTable;
use crate::model::{replicate_system, ArmModel, SystemSpec};
use crate::policies::{FawtMode, PolicyConfig, PolicyKind, PolicyState, DEFAULT_DPP_V};

pub const DEFAULT_HORIZON: usize = 10_000;
pub const DEFAULT_RUNS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SimMetrics {
    /// `sum_t beta^t sum_n r_{n,t}`, from `t = 0`.
    pub discounted_total_reward: f64,
    pub avg_reward_per_step: f64,
    /// Time-average penalty per arm.
    pub per_arm_avg_penalty: Vec<f64>,
    /// `max(0, avg penalty - B)` per arm.
    pub per_arm_violation: Vec<f64>,
    pub mean_violation: f64,
    /// `(1 - beta) sum_t beta^t g_{n,t}` per arm.
    pub per_arm_discounted_penalty: Vec<f64>,
    pub per_arm_discounted_violation: Vec<f64>,
    pub discounted_mean_violation: f64,
    /// Activations spent on arms whose index was negative.
    pub negative_index_activations: u64,
    pub horizon: usize,
    pub seed: u64,
}

/// Per-step totals of one episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    /// Total reward collected at each step.
    pub rewards: Vec<f64>,
    /// `penalties[t][n]`
    pub penalties: Vec<Vec<f64>>,
}

struct Accumulator {
    beta: f64,
    weight: f64,
    discounted_reward: f64,
    total_reward: f64,
    penalty_sum: Vec<f64>,
    discounted_penalty: Vec<f64>,
    steps: usize,
}

impl Accumulator {
    fn new(beta: f64, arms: usize) -> Self {
        Self {
            beta,
            weight: 1.0,
            discounted_reward: 0.0,
            total_reward: 0.0,
            penalty_sum: vec![0.0; arms],
            discounted_penalty: vec![0.0; arms],
            steps: 0,
        }
    }

    fn push(&mut self, reward: f64, penalties: &[f64]) {
        self.discounted_reward += self.weight * reward;
        self.total_reward += reward;
        for (n, g) in penalties.iter().enumerate() {
            self.penalty_sum[n] += g;
            self.discounted_penalty[n] += self.weight * g;
        }
        self.weight *= self.beta;
        self.steps += 1;
    }

    fn finish(self, budgets: &[f64], seed: u64, negative_index_activations: u64) -> SimMetrics {
        let t = self.steps as f64;
        let avg: Vec<f64> = self.penalty_sum.iter().map(|s| s / t).collect();
        let viol: Vec<f64> = avg.iter().zip(budgets).map(|(g, b)| (g - b).max(0.0)).collect();
        let disc: Vec<f64> = self.discounted_penalty.iter().map(|s| (1.0 - self.beta) * s).collect();
        let disc_viol: Vec<f64> = disc.iter().zip(budgets).map(|(g, b)| (g - b).max(0.0)).collect();
        let n = budgets.len().max(1) as f64;
        SimMetrics {
            discounted_total_reward: self.discounted_reward,
            avg_reward_per_step: self.total_reward / t,
            mean_violation: viol.iter().sum::<f64>() / n,
            discounted_mean_violation: disc_viol.iter().sum::<f64>() / n,
            per_arm_avg_penalty: avg,
            per_arm_violation: viol,
            per_arm_discounted_penalty: disc,
            per_arm_discounted_violation: disc_viol,
            negative_index_activations,
            horizon: self.steps,
            seed,
        }
    }
}

/// Metrics of a recorded trace.
pub fn compute_metrics(trace: &Trace, budgets: &[f64], beta: f64, seed: u64) -> Result<SimMetrics> {
    if trace.rewards.is_empty() || trace.rewards.len() != trace.penalties.len() {
        return Err(Error::InvalidArgument(
            "trace must be non-empty with one penalty row per step".into(),
        ));
    }
    let mut acc = Accumulator::new(beta, budgets.len());
    for (r, g) in trace.rewards.iter().zip(&trace.penalties) {
        if g.len() != budgets.len() {
            return Err(Error::InvalidArgument(
                "penalty row length differs from the number of budgets".into(),
            ));
        }
        acc.push(*r, g);
    }
    Ok(acc.finish(budgets, seed, 0))
}

/// Cumulative rows for inverse-CDF sampling of one arm model.
struct Sampler {
    /// `(a * n + s)` rows of cumulative next-state probabilities.
    cum: Vec<Vec<f64>>,
    last: Vec<usize>,
    init_cum: Vec<f64>,
    init_last: usize,
}

fn cumulative(p: &[f64]) -> (Vec<f64>, usize) {
    let mut acc = 0.0;
    let cum = p
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect();
    let last = p.iter().rposition(|&x| x > 0.0).unwrap_or(0);
    (cum, last)
}

#[inline]
fn draw(cum: &[f64], last: usize, u: f64) -> usize {
    cum.partition_point(|&c| c <= u).min(last)
}

impl Sampler {
    fn new(arm: &ArmModel) -> Self {
        let n = arm.num_states();
        let mut cum = Vec::with_capacity(2 * n);
        let mut last = Vec::with_capacity(2 * n);
        for a in 0..2 {
            for s in 0..n {
                let (c, l) = cumulative(arm.kernel_row(s, a));
                cum.push(c);
                last.push(l);
            }
        }
        let (init_cum, init_last) = cumulative(arm.init_dist());
        Self {
            cum,
            last,
            init_cum,
            init_last,
        }
    }

    fn initial(&self, rng: &mut ChaCha8Rng) -> usize {
        draw(&self.init_cum, self.init_last, rng.random::<f64>())
    }

    fn next(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> usize {
        let row = a * self.init_cum.len() + s;
        draw(&self.cum[row], self.last[row], rng.random::<f64>())
    }
}

fn simulate(
    system: &SystemSpec,
    ps: &mut PolicyState,
    horizon: usize,
    seed: u64,
    mut on_step: impl FnMut(f64, &[f64]),
) -> Result<()> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    let n = system.num_arms();
    let samplers: Vec<Sampler> = system.group_arms().map(Sampler::new).collect();
    let group: Vec<usize> = (0..n).map(|i| system.group_of(i)).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut states: Vec<usize> = (0..n).map(|i| samplers[group[i]].initial(&mut rngs[i])).collect();
    let mut penalties = vec![0.0; n];
    for _ in 0..horizon {
        let actions = ps.step(system, &states)?;
        let active = actions.iter().filter(|a| **a).count();
        if active != system.capacity {
            return Err(Error::Policy(format!(
                "{} policy activated {active} arms, capacity is {}",
                ps.kind(),
                system.capacity
            )));
        }
        let mut reward = 0.0;
        for i in 0..n {
            let arm = &system.arms[i];
            let a = actions[i] as usize;
            reward += arm.reward(states[i], a);
            penalties[i] = arm.penalty(states[i], a);
            states[i] = samplers[group[i]].next(states[i], a, &mut rngs[i]);
        }
        on_step(reward, &penalties);
    }
    Ok(())
}

/// Simulates `horizon` steps and returns the episode's metrics.
pub fn run_episode(system: &SystemSpec, ps: &mut PolicyState, horizon: usize, seed: u64) -> Result<SimMetrics> {
    let mut acc = Accumulator::new(system.discount, system.num_arms());
    simulate(system, ps, horizon, seed, |r, g| acc.push(r, g))?;
    let budgets: Vec<f64> = system.arms.iter().map(|a| a.budget()).collect();
    Ok(acc.finish(&budgets, seed, ps.negative_index_activations()))
}

/// Same episode as [`run_episode`], returned as a raw trace.
pub fn record_trace(system: &SystemSpec, ps: &mut PolicyState, horizon: usize, seed: u64) -> Result<Trace> {
    let mut trace = Trace::default();
    simulate(system, ps, horizon, seed, |r, g| {
        trace.rewards.push(r);
        trace.penalties.push(g.to_vec());
    })?;
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }

    /// Standard error of the mean over `n` runs.
    pub fn std_error(&self, n: usize) -> f64 {
        self.std / (n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    /// Base (un-replicated) system.
    pub system: SystemSpec,
    pub policies: Vec<PolicyKind>,
    pub k_values: Vec<usize>,
    pub runs: usize,
    pub horizon: usize,
    pub base_seed: u64,
    pub dpp_v: f64,
    pub fawt_mode: FawtMode,
    /// One per group; needed by the POW policy.
    pub pow_tables: Option<Vec<IndexTable>>,
    /// One per group; needed by Whittle and FaWT.
    pub whittle_tables: Option<Vec<IndexTable>>,
}

impl ExperimentSpec {
    pub fn new(system: SystemSpec, policies: Vec<PolicyKind>, k_values: Vec<usize>) -> Self {
        Self {
            system,
            policies,
            k_values,
            runs: DEFAULT_RUNS,
            horizon: DEFAULT_HORIZON,
            base_seed: 0,
            dpp_v: DEFAULT_DPP_V,
            fawt_mode: FawtMode::PrioritizeViolators,
            pow_tables: None,
            whittle_tables: None,
        }
    }

    fn check(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::config("experiment.policies", "at least one policy is required"));
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::config(
                "experiment.k_values",
                "K values must be a non-empty list of positive integers",
            ));
        }
        if self.runs == 0 {
            return Err(Error::config("experiment.runs", "must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("experiment.horizon", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub discounted_total_reward: Summary,
    pub avg_reward_per_step: Summary,
    pub reward_per_unit: Summary,
    pub discounted_reward_per_unit: Summary,
    pub mean_violation: Summary,
    pub discounted_mean_violation: Summary,
}

impl CellStats {
    pub fn from_runs(runs: &[SimMetrics], k: usize) -> Self {
        let col = |f: &dyn Fn(&SimMetrics) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
        let k = k as f64;
        Self {
            discounted_total_reward: col(&|m| m.discounted_total_reward),
            avg_reward_per_step: col(&|m| m.avg_reward_per_step),
            reward_per_unit: col(&|m| m.avg_reward_per_step / k),
            discounted_reward_per_unit: col(&|m| m.discounted_total_reward / k),
            mean_violation: col(&|m| m.mean_violation),
            discounted_mean_violation: col(&|m| m.discounted_mean_violation),
        }
    }
}

/// All runs of one `(K, policy)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub k: usize,
    pub policy: PolicyKind,
    pub runs: Vec<SimMetrics>,
    pub stats: CellStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub cells: Vec<CellResult>,
}

impl ExperimentResult {
    pub fn cell(&self, k: usize, policy: PolicyKind) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.k == k && c.policy == policy)
    }
}

/// Runs every `(K, policy, run)` combination. Run `r` uses seed
/// `base_seed + r` for every K and policy.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.check()?;
    let systems: Vec<SystemSpec> = spec
        .k_values
        .iter()
        .map(|&k| replicate_system(&spec.system, k))
        .collect::<Result<_>>()?;
    // validate policy resources once, before spawning runs
    for &policy in &spec.policies {
        PolicyState::new(
            &policy_config(spec, policy, 0),
            &systems[0],
            spec.pow_tables.as_deref(),
            spec.whittle_tables.as_deref(),
        )?;
    }

    let jobs: Vec<(usize, PolicyKind, usize)> = (0..spec.k_values.len())
        .flat_map(|ki| {
            spec.policies
                .iter()
                .flat_map(move |&p| (0..spec.runs).map(move |r| (ki, p, r)))
        })
        .collect();
    let metrics: Vec<SimMetrics> = jobs
        .par_iter()
        .map(|&(ki, policy, run)| {
            let seed = spec.base_seed.wrapping_add(run as u64);
            let sys = &systems[ki];
            let mut ps = PolicyState::new(
                &policy_config(spec, policy, seed),
                sys,
                spec.pow_tables.as_deref(),
                spec.whittle_tables.as_deref(),
            )?;
            run_episode(sys, &mut ps, spec.horizon, seed)
        })
        .collect::<Result<_>>()?;

    let cells = metrics
        .chunks(spec.runs)
        .zip(jobs.chunks(spec.runs))
        .map(|(runs, job)| {
            let k = spec.k_values[job[0].0];
            CellResult {
                k,
                policy: job[0].1,
                stats: CellStats::from_runs(runs, k),
                runs: runs.to_vec(),
            }
        })
        .collect();
    Ok(ExperimentResult { cells })
}

fn policy_config(spec: &ExperimentSpec, kind: PolicyKind, seed: u64) -> PolicyConfig {
    PolicyConfig {
        kind,
        dpp_v: spec.dpp_v,
        fawt_mode: spec.fawt_mode,
        seed,
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// One row per `(K, policy, run)`; per-arm vectors are `;`-joined.
pub fn write_runs_csv<W: Write>(out: W, config_hash: &str, scenario: &str, result: &ExperimentResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "config_hash",
        "scenario",
        "policy",
        "k",
        "run",
        "seed",
        "horizon",
        "discounted_total_reward",
        "avg_reward_per_step",
        "reward_per_unit",
        "discounted_reward_per_unit",
        "mean_violation",
        "discounted_mean_violation",
        "negative_index_activations",
        "per_arm_avg_penalty",
        "per_arm_violation",
        "per_arm_discounted_penalty",
        "per_arm_discounted_violation",
    ])?;
    for cell in &result.cells {
        let k = cell.k as f64;
        for (run, m) in cell.runs.iter().enumerate() {
            w.write_record([
                config_hash.to_string(),
                scenario.to_string(),
                cell.policy.to_string(),
                cell.k.to_string(),
                run.to_string(),
                m.seed.to_string(),
                m.horizon.to_string(),
                m.discounted_total_reward.to_string(),
                m.avg_reward_per_step.to_string(),
                (m.avg_reward_per_step / k).to_string(),
                (m.discounted_total_reward / k).to_string(),
                m.mean_violation.to_string(),
                m.discounted_mean_violation.to_string(),
                m.negative_index_activations.to_string(),
                join(&m.per_arm_avg_penalty),
                join(&m.per_arm_violation),
                join(&m.per_arm_discounted_penalty),
                join(&m.per_arm_discounted_violation),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean and standard deviation per `(K, policy)`. `fluid_per_unit`, when
/// given, is repeated on every row for comparison with `reward_per_unit`.
pub fn write_aggregate_csv<W: Write>(
    out: W,
    config_hash: &str,
    scenario: &str,
    result: &ExperimentResult,
    fluid_per_unit: Option<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let stats = [
        "discounted_total_reward",
        "avg_reward_per_step",
        "reward_per_unit",
        "discounted_reward_per_unit",
        "mean_violation",
        "discounted_mean_violation",
    ];
    let mut header = vec![
        "config_hash".to_string(),
        "scenario".into(),
        "policy".into(),
        "k".into(),
        "runs".into(),
    ];
    for s in stats {
        header.push(format!("{s}_mean"));
        header.push(format!("{s}_std"));
    }
    header.push("fluid_per_unit".into());
    w.write_record(&header)?;
    for cell in &result.cells {
        let st = &cell.stats;
        let mut row = vec![
            config_hash.to_string(),
            scenario.to_string(),
            cell.policy.to_string(),
            cell.k.to_string(),
            cell.runs.len().to_string(),
        ];
        for s in [
            st.discounted_total_reward,
            st.avg_reward_per_step,
            st.reward_per_unit,
            st.discounted_reward_per_unit,
            st.mean_violation,
            st.discounted_mean_violation,
        ] {
            row.push(s.mean.to_string());
            row.push(s.std.to_string());
        }
        row.push(fluid_per_unit.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::remote_sensing_arm;

    #[test]
    fn always_scheduled_perfect_channel_pins_aoi() {
        let sys = SystemSpec::new(vec![remote_sensing_arm(1.0, 1.0).unwrap()], 1, 0.99).unwrap();
        let mut ps = PolicyState::new(&PolicyConfig::new(PolicyKind::Dpp, 0), &sys, None, None).unwrap();
        let m = run_episode(&sys, &mut ps, 500, 9).unwrap();
        assert!((m.avg_reward_per_step + 1.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn seeded_runs_repeat() {
        let sys = SystemSpec::new(
            vec![
                remote_sensing_arm(0.3, 0.5).unwrap(),
                remote_sensing_arm(0.7, 0.2).unwrap(),
            ],
            1,
            0.99,
        )
        .unwrap();
        let run = |seed| {
            let mut ps = PolicyState::new(&PolicyConfig::new(PolicyKind::Random, seed), &sys, None, None).unwrap();
            run_episode(&sys, &mut ps, 2000, seed).unwrap()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn zero_rewards_and_boundary_penalty() {
        let trace = Trace {
            rewards: vec![0.0; 5],
            penalties: vec![vec![0.3, 0.1]; 5],
        };
        let m = compute_metrics(&trace, &[0.3, 0.5], 0.9, 0).unwrap();
        assert_eq!(m.discounted_total_reward, 0.0);
        assert_eq!(m.per_arm_violation, vec![0.0, 0.0]);
        assert!(compute_metrics(&Trace::default(), &[0.3], 0.9, 0).is_err());
    }

    #[test]
    fn metrics_match_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let steps = 300;
        let trace = Trace {
            rewards: (0..steps).map(|_| rng.random_range(-1.0..2.0)).collect(),
            penalties: (0..steps)
                .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
                .collect(),
        };
        let budgets = [0.4, 0.5, 0.6];
        let beta: f64 = 0.97;
        let m = compute_metrics(&trace, &budgets, beta, 0).unwrap();
        let disc: f64 = (0..steps).map(|t| beta.powi(t as i32) * trace.rewards[t]).sum();
        assert!((m.discounted_total_reward - disc).abs() < 1e-10);
        for n in 0..3 {
            let avg = (0..steps).map(|t| trace.penalties[t][n]).sum::<f64>() / steps as f64;
            assert!((m.per_arm_avg_penalty[n] - avg).abs() < 1e-12);
            assert!((m.per_arm_violation[n] - (avg - budgets[n]).max(0.0)).abs() < 1e-12);
            let d = (1.0 - beta)
                * (0..steps)
                    .map(|t| beta.powi(t as i32) * trace.penalties[t][n])
                    .sum::<f64>();
            assert!((m.per_arm_discounted_penalty[n] - d).abs() < 1e-10);
        }
        let mean = m.per_arm_violation.iter().sum::<f64>() / 3.0;
        assert!((m.mean_violation - mean).abs() < 1e-12);
    }

    #[test]
    fn single_run_has_zero_std() {
        let s = Summary::of(&[2.5]);
        assert_eq!((s.mean, s.std), (2.5, 0.0));
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn experiment_cells_and_stats() {
        let base = SystemSpec::new(
            vec![
                remote_sensing_arm(0.3, 0.5).unwrap(),
                remote_sensing_arm(0.7, 0.2).unwrap(),
            ],
            1,
            0.99,
        )
        .unwrap();
        let mut spec = ExperimentSpec::new(base, vec![PolicyKind::Random, PolicyKind::Dpp], vec![1, 3]);
        spec.runs = 3;
        spec.horizon = 200;
        let res = run_experiment(&spec).unwrap();
        assert_eq!(res.cells.len(), 4);
        for cell in &res.cells {
            assert_eq!(cell.runs.len(), 3);
            assert_eq!(cell.stats, CellStats::from_runs(&cell.runs, cell.k));
            let seeds: Vec<u64> = cell.runs.iter().map(|m| m.seed).collect();
            assert_eq!(seeds, vec![0, 1, 2]);
        }
        assert_eq!(res.cell(3, PolicyKind::Dpp).unwrap().runs[0].per_arm_violation.len(), 6);
        spec.policies.clear();
        assert!(matches!(run_experiment(&spec), Err(Error::Config { .. })));
    }
}
