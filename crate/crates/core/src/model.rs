//! Arm MDPs with per-arm penalty budgets, the three scheduling scenarios,
//! and K-fold replication of a system.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// One restless arm: a two-action finite MDP with a reward table, a penalty
/// table and a per-step penalty budget.
///
/// The kernel is stored flat as `kernel[(a * n + s) * n + s']`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    num_states: usize,
    reward: Vec<[f64; 2]>,
    penalty: Vec<[f64; 2]>,
    kernel: Vec<f64>,
    budget: f64,
    init_dist: Vec<f64>,
}

impl ArmModel {
    /// Builds an arm, checking only table shapes. Content invariants are
    /// reported by [`validate_arm`].
    pub fn new(
        reward: Vec<[f64; 2]>,
        penalty: Vec<[f64; 2]>,
        kernel: Vec<f64>,
        budget: f64,
        init_dist: Vec<f64>,
    ) -> Result<Self> {
        let n = reward.len();
        if n == 0 {
            return Err(Error::InvalidModel("arm has no states".into()));
        }
        if penalty.len() != n || init_dist.len() != n {
            return Err(Error::InvalidModel(format!(
                "table lengths disagree: reward {n}, penalty {}, init_dist {}",
                penalty.len(),
                init_dist.len()
            )));
        }
        if kernel.len() != 2 * n * n {
            return Err(Error::InvalidModel(format!(
                "kernel has {} entries, expected {}",
                kernel.len(),
                2 * n * n
            )));
        }
        Ok(Self {
            num_states: n,
            reward,
            penalty,
            kernel,
            budget,
            init_dist,
        })
    }

    /// Builds an arm and rejects it if [`validate_arm`] reports anything.
    pub fn new_validated(
        reward: Vec<[f64; 2]>,
        penalty: Vec<[f64; 2]>,
        kernel: Vec<f64>,
        budget: f64,
        init_dist: Vec<f64>,
    ) -> Result<Self> {
        let arm = Self::new(reward, penalty, kernel, budget, init_dist)?;
        let report = validate_arm(&arm);
        if report.is_empty() {
            Ok(arm)
        } else {
            Err(Error::InvalidModel(report.to_string()))
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    pub fn penalty(&self, s: usize, a: usize) -> f64 {
        self.penalty[s][a]
    }

    pub fn rewards(&self) -> &[[f64; 2]] {
        &self.reward
    }

    pub fn penalties(&self) -> &[[f64; 2]] {
        &self.penalty
    }

    /// Transition probabilities out of `s` under action `a`.
    pub fn kernel_row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let start = (a * n + s) * n;
        &self.kernel[start..start + n]
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }

    pub fn with_budget(&self, budget: f64) -> Self {
        Self { budget, ..self.clone() }
    }

    pub fn with_init_dist(&self, init_dist: Vec<f64>) -> Result<Self> {
        Self::new(
            self.reward.clone(),
            self.penalty.clone(),
            self.kernel.clone(),
            self.budget,
            init_dist,
        )
    }

    pub fn has_zero_penalty(&self) -> bool {
        self.penalty.iter().all(|g| g[0] == 0.0 && g[1] == 0.0)
    }

    pub fn max_penalty(&self) -> f64 {
        self.penalty.iter().flat_map(|g| g.iter().copied()).fold(0.0, f64::max)
    }

    /// `(min, max)` over all reward entries.
    pub fn reward_range(&self) -> (f64, f64) {
        self.reward
            .iter()
            .flat_map(|r| r.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    KernelRowSum {
        state: usize,
        action: usize,
        sum: f64,
    },
    KernelEntry {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },
    InitDistSum {
        sum: f64,
    },
    InitDistEntry {
        state: usize,
        value: f64,
    },
    NonFiniteReward {
        state: usize,
        action: usize,
    },
    NegativePenalty {
        state: usize,
        action: usize,
        value: f64,
    },
    NonFinitePenalty {
        state: usize,
        action: usize,
    },
    Budget {
        value: f64,
    },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::KernelRowSum { state, action, sum } => {
                write!(f, "kernel row P(.|s={state},a={action}) sums to {sum}")
            }
            ValidationIssue::KernelEntry {
                state,
                action,
                next,
                value,
            } => write!(f, "kernel entry P({next}|s={state},a={action}) = {value} outside [0,1]"),
            ValidationIssue::InitDistSum { sum } => {
                write!(f, "initial distribution sums to {sum}")
            }
            ValidationIssue::InitDistEntry { state, value } => {
                write!(f, "initial distribution alpha({state}) = {value} outside [0,1]")
            }
            ValidationIssue::NonFiniteReward { state, action } => {
                write!(f, "reward r(s={state},a={action}) is not finite")
            }
            ValidationIssue::NegativePenalty { state, action, value } => {
                write!(f, "penalty g(s={state},a={action}) = {value} < 0")
            }
            ValidationIssue::NonFinitePenalty { state, action } => {
                write!(f, "penalty g(s={state},a={action}) is not finite")
            }
            ValidationIssue::Budget { value } => {
                write!(f, "budget B = {value} must be finite and >= 0")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

/// Lists every violated arm invariant. Never fails.
pub fn validate_arm(arm: &ArmModel) -> ValidationReport {
    let n = arm.num_states();
    let mut issues = Vec::new();
    for s in 0..n {
        for a in 0..2 {
            let row = arm.kernel_row(s, a);
            for (next, &p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    issues.push(ValidationIssue::KernelEntry {
                        state: s,
                        action: a,
                        next,
                        value: p,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if !((sum - 1.0).abs() <= ROW_SUM_TOL) {
                issues.push(ValidationIssue::KernelRowSum {
                    state: s,
                    action: a,
                    sum,
                });
            }
            if !arm.reward(s, a).is_finite() {
                issues.push(ValidationIssue::NonFiniteReward { state: s, action: a });
            }
            let g = arm.penalty(s, a);
            if !g.is_finite() {
                issues.push(ValidationIssue::NonFinitePenalty { state: s, action: a });
            } else if g < 0.0 {
                issues.push(ValidationIssue::NegativePenalty {
                    state: s,
                    action: a,
                    value: g,
                });
            }
        }
    }
    for (state, &p) in arm.init_dist().iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            issues.push(ValidationIssue::InitDistEntry { state, value: p });
        }
    }
    let sum: f64 = arm.init_dist().iter().sum();
    if !((sum - 1.0).abs() <= ROW_SUM_TOL) {
        issues.push(ValidationIssue::InitDistSum { sum });
    }
    if !(arm.budget().is_finite() && arm.budget() >= 0.0) {
        issues.push(ValidationIssue::Budget { value: arm.budget() });
    }
    ValidationReport { issues }
}

/// `N` arms sharing a per-step activation capacity.
///
/// When built by [`replicate_system`], arms come in contiguous groups of
/// `replication` identical copies.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub arms: Vec<ArmModel>,
    pub capacity: usize,
    pub discount: f64,
    pub replication: usize,
}

impl SystemSpec {
    pub fn new(arms: Vec<ArmModel>, capacity: usize, discount: f64) -> Result<Self> {
        let spec = Self {
            arms,
            capacity,
            discount,
            replication: 1,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        let n = self.arms.len();
        if self.capacity < 1 || self.capacity > n {
            return Err(Error::InvalidModel(format!(
                "capacity {} must lie in [1, {n}]",
                self.capacity
            )));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::InvalidModel(format!(
                "discount {} must lie in (0, 1)",
                self.discount
            )));
        }
        if self.replication < 1 || !n.is_multiple_of(self.replication) {
            return Err(Error::InvalidModel(format!(
                "replication {} does not divide {n} arms",
                self.replication
            )));
        }
        Ok(())
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn num_groups(&self) -> usize {
        self.arms.len() / self.replication
    }

    pub fn group_of(&self, arm: usize) -> usize {
        arm / self.replication
    }

    /// One representative arm per replication group.
    pub fn group_arms(&self) -> impl Iterator<Item = &ArmModel> {
        self.arms.iter().step_by(self.replication)
    }

    /// The un-replicated system: one arm per group and capacity `C / K`.
    pub fn base_system(&self) -> SystemSpec {
        SystemSpec {
            arms: self.group_arms().cloned().collect(),
            capacity: self.capacity / self.replication,
            discount: self.discount,
            replication: 1,
        }
    }
}

/// Duplicates every arm `k` times, keeping group order, and scales capacity
/// by `k`.
pub fn replicate_system(spec: &SystemSpec, k: usize) -> Result<SystemSpec> {
    if k == 0 {
        return Err(Error::InvalidArgument("replication factor K must be >= 1".into()));
    }
    let arms = spec
        .arms
        .iter()
        .flat_map(|arm| std::iter::repeat_n(arm, k).cloned())
        .collect();
    Ok(SystemSpec {
        arms,
        capacity: spec.capacity * k,
        discount: spec.discount,
        replication: spec.replication * k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    #[serde(alias = "ThroughputActivation", alias = "throughput")]
    ThroughputActivation,
    #[serde(alias = "RemoteSensing")]
    RemoteSensing,
    #[serde(alias = "ServiceRegularity")]
    ServiceRegularity,
}

impl ScenarioKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::ThroughputActivation => "throughput_activation",
            ScenarioKind::RemoteSensing => "remote_sensing",
            ScenarioKind::ServiceRegularity => "service_regularity",
        }
    }

    /// Default cap on the penalty multiplier for this scenario.
    pub fn default_mu_cap(&self) -> f64 {
        match self {
            ScenarioKind::RemoteSensing => 10.0,
            _ => 5.0,
        }
    }
}

pub const THROUGHPUT_STATES: usize = 50;
pub const AOI_CAP: usize = 30;
pub const CHANNEL_LEVELS: usize = 10;
pub const REGULARITY_LEVELS: usize = 10;

fn default_capacity() -> usize {
    1
}

fn default_discount() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub theta0: Vec<f64>,
    #[serde(default)]
    pub theta1: Vec<f64>,
    #[serde(default)]
    pub delta: Vec<f64>,
    #[serde(default)]
    pub p: Vec<f64>,
    #[serde(default)]
    pub budgets: Vec<f64>,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

impl ScenarioConfig {
    pub fn throughput_activation(theta0: Vec<f64>, theta1: Vec<f64>, delta: Vec<f64>) -> Self {
        Self {
            kind: ScenarioKind::ThroughputActivation,
            theta0,
            theta1,
            delta,
            p: Vec::new(),
            budgets: Vec::new(),
            capacity: 1,
            discount: 0.99,
        }
    }

    pub fn remote_sensing(p: Vec<f64>, budgets: Vec<f64>) -> Self {
        Self {
            kind: ScenarioKind::RemoteSensing,
            theta0: Vec::new(),
            theta1: Vec::new(),
            delta: Vec::new(),
            p,
            budgets,
            capacity: 1,
            discount: 0.99,
        }
    }

    pub fn service_regularity(theta0: Vec<f64>, theta1: Vec<f64>, budgets: Vec<f64>) -> Self {
        Self {
            kind: ScenarioKind::ServiceRegularity,
            theta0,
            theta1,
            delta: Vec::new(),
            p: Vec::new(),
            budgets,
            capacity: 1,
            discount: 0.99,
        }
    }

    /// Benchmark parameter sets, keyed by scenario and arm count.
    pub fn benchmark(kind: ScenarioKind, num_arms: usize) -> Option<Self> {
        let cfg = match (kind, num_arms) {
            (ScenarioKind::ThroughputActivation, 4) => {
                Self::throughput_activation(vec![0.3, 0.5, 0.7, 0.9], vec![0.02; 4], vec![0.35, 0.35, 0.05, 0.05])
            }
            // first six of a seven-value source row
            (ScenarioKind::ThroughputActivation, 6) => Self::throughput_activation(
                vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
                vec![0.02; 6],
                vec![0.2, 0.2, 0.1, 0.1, 0.05, 0.05],
            ),
            (ScenarioKind::RemoteSensing, 4) => {
                Self::remote_sensing(vec![0.2, 0.4, 0.6, 0.8], vec![0.9, 0.9, 0.1, 0.1])
            }
            (ScenarioKind::RemoteSensing, 8) => Self::remote_sensing(
                vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
                vec![0.4, 0.4, 0.2, 0.2, 0.1, 0.1, 0.05, 0.05],
            ),
            (ScenarioKind::ServiceRegularity, 4) => {
                Self::service_regularity(vec![0.4, 0.5, 0.6, 0.7], vec![0.1; 4], vec![0.2, 0.2, 0.1, 0.1])
            }
            (ScenarioKind::ServiceRegularity, 6) => Self::service_regularity(
                vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
                vec![0.1; 6],
                vec![0.4, 0.4, 0.8, 0.8, 1.0, 1.0],
            ),
            _ => return None,
        };
        Some(cfg)
    }

    pub fn num_arms(&self) -> usize {
        match self.kind {
            ScenarioKind::RemoteSensing => self.p.len(),
            _ => self.theta0.len(),
        }
    }

    fn check_len(&self, key: &str, v: &[f64], n: usize) -> Result<()> {
        if v.len() != n {
            return Err(Error::config(
                format!("scenario.{key}"),
                format!("expected {n} values, found {}", v.len()),
            ));
        }
        if let Some(x) = v.iter().find(|x| !x.is_finite()) {
            return Err(Error::config(format!("scenario.{key}"), format!("{x} is not finite")));
        }
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        let n = self.num_arms();
        if n == 0 {
            return Err(Error::config("scenario", "no arms configured"));
        }
        match self.kind {
            ScenarioKind::ThroughputActivation => {
                self.check_len("theta0", &self.theta0, n)?;
                self.check_len("theta1", &self.theta1, n)?;
                self.check_len("delta", &self.delta, n)?;
                if let Some(d) = self.delta.iter().find(|d| !(0.0..=1.0).contains(*d)) {
                    return Err(Error::config("scenario.delta", format!("{d} outside [0,1]")));
                }
            }
            ScenarioKind::RemoteSensing => {
                self.check_len("p", &self.p, n)?;
                self.check_len("budgets", &self.budgets, n)?;
                if let Some(p) = self.p.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
                    return Err(Error::config("scenario.p", format!("{p} outside (0,1]")));
                }
            }
            ScenarioKind::ServiceRegularity => {
                self.check_len("theta0", &self.theta0, n)?;
                self.check_len("theta1", &self.theta1, n)?;
                self.check_len("budgets", &self.budgets, n)?;
            }
        }
        if matches!(self.kind, ScenarioKind::RemoteSensing | ScenarioKind::ServiceRegularity) {
            if let Some(b) = self.budgets.iter().find(|b| **b < 0.0) {
                return Err(Error::config("scenario.budgets", format!("{b} is negative")));
            }
        }
        if self.capacity < 1 || self.capacity > n {
            return Err(Error::config(
                "scenario.capacity",
                format!("{} must lie in [1, {n}]", self.capacity),
            ));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::config(
                "scenario.discount",
                format!("{} must lie in (0,1)", self.discount),
            ));
        }
        Ok(())
    }
}

/// Throughput arm: uniform i.i.d. channel over `{1..50}`, reward
/// `(theta0 + theta1 s) a`, penalty `1 - a`, budget `1 - delta`.
pub fn throughput_arm(theta0: f64, theta1: f64, delta: f64) -> Result<ArmModel> {
    let n = THROUGHPUT_STATES;
    let reward = (1..=n).map(|s| [0.0, theta0 + theta1 * s as f64]).collect();
    let penalty = vec![[1.0, 0.0]; n];
    let kernel = vec![1.0 / n as f64; 2 * n * n];
    let init = vec![1.0 / n as f64; n];
    ArmModel::new_validated(reward, penalty, kernel, 1.0 - delta, init)
}

/// Remote-sensing arm over AoI `{1..30}`: passive ages deterministically,
/// active resets to 1 with probability `p`.
pub fn remote_sensing_arm(p: f64, budget: f64) -> Result<ArmModel> {
    let n = AOI_CAP;
    let mut kernel = vec![0.0; 2 * n * n];
    for s in 0..n {
        let aged = (s + 1).min(n - 1);
        kernel[s * n + aged] = 1.0;
        kernel[(n + s) * n] += p;
        kernel[(n + s) * n + aged] += 1.0 - p;
    }
    let reward = (1..=n)
        .map(|s| {
            let r = -(s as f64) / n as f64;
            [r, r]
        })
        .collect();
    let penalty = vec![[0.0, 1.0]; n];
    let mut init = vec![0.0; n];
    init[0] = 1.0;
    ArmModel::new_validated(reward, penalty, kernel, budget, init)
}

/// Flat index of the service-regularity state `(d, h)`, `d` in `1..=10`.
pub fn regularity_state(d: usize, h: usize) -> usize {
    h * CHANNEL_LEVELS + (d - 1)
}

/// Service-regularity arm over `(d, h)`: `d` i.i.d. uniform, `h` resets on
/// activation and otherwise grows to 9. Penalty `h / 9` is action-independent.
pub fn service_regularity_arm(theta0: f64, theta1: f64, budget: f64) -> Result<ArmModel> {
    let n = CHANNEL_LEVELS * REGULARITY_LEVELS;
    let hmax = REGULARITY_LEVELS - 1;
    let mut reward = vec![[0.0; 2]; n];
    let mut penalty = vec![[0.0; 2]; n];
    let mut kernel = vec![0.0; 2 * n * n];
    let pd = 1.0 / CHANNEL_LEVELS as f64;
    for h in 0..REGULARITY_LEVELS {
        for d in 1..=CHANNEL_LEVELS {
            let s = regularity_state(d, h);
            reward[s] = [0.0, theta0 + theta1 * d as f64];
            let g = h as f64 / hmax as f64;
            penalty[s] = [g, g];
            for (a, next_h) in [(0, (h + 1).min(hmax)), (1, 0)] {
                for d2 in 1..=CHANNEL_LEVELS {
                    kernel[(a * n + s) * n + regularity_state(d2, next_h)] = pd;
                }
            }
        }
    }
    let mut init = vec![0.0; n];
    for d in 1..=CHANNEL_LEVELS {
        init[regularity_state(d, 0)] = pd;
    }
    ArmModel::new_validated(reward, penalty, kernel, budget, init)
}

pub fn make_scenario(config: &ScenarioConfig) -> Result<SystemSpec> {
    config.check()?;
    let n = config.num_arms();
    let arms = (0..n)
        .map(|i| match config.kind {
            ScenarioKind::ThroughputActivation => throughput_arm(config.theta0[i], config.theta1[i], config.delta[i]),
            ScenarioKind::RemoteSensing => remote_sensing_arm(config.p[i], config.budgets[i]),
            ScenarioKind::ServiceRegularity => {
                service_regularity_arm(config.theta0[i], config.theta1[i], config.budgets[i])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    SystemSpec::new(arms, config.capacity, config.discount)
}
