//! Scheduling policies over joint states. Every step activates exactly `C`
//! arms.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::IndexTable;
use crate::model::{ScenarioKind, SystemSpec};

pub const DEFAULT_DPP_V: f64 = 10.0;

/// Stream id reserved for the random policy's coin flips; arm streams use
/// the arm id.
pub const POLICY_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Pow,
    Whittle,
    Fawt,
    Dpp,
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Pow,
        PolicyKind::Whittle,
        PolicyKind::Fawt,
        PolicyKind::Dpp,
        PolicyKind::Random,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Pow => "pow",
            PolicyKind::Whittle => "whittle",
            PolicyKind::Fawt => "fawt",
            PolicyKind::Dpp => "dpp",
            PolicyKind::Random => "random",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Policy(format!("unknown policy `{s}`")))
    }
}

/// How FaWT treats arms whose running penalty exceeds the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FawtMode {
    /// Serve violators first (largest violation first), then fill by
    /// Whittle index. Suits penalties that activation relieves.
    PrioritizeViolators,
    /// Serve only arms within budget, by Whittle index; violators are used
    /// only when too few arms qualify. Suits penalties that activation
    /// incurs.
    ExcludeViolators,
}

impl FawtMode {
    pub fn for_kind(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::RemoteSensing => FawtMode::ExcludeViolators,
            ScenarioKind::ThroughputActivation | ScenarioKind::ServiceRegularity => FawtMode::PrioritizeViolators,
        }
    }
}

/// The `C` highest scores, ties to the lower arm id.
pub fn select_top_c(scores: &[f64], capacity: usize) -> Result<Vec<bool>> {
    if capacity > scores.len() {
        return Err(Error::Policy(format!(
            "capacity {capacity} exceeds the number of arms {}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut active = vec![false; scores.len()];
    for &i in &order[..capacity] {
        active[i] = true;
    }
    Ok(active)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub dpp_v: f64,
    pub fawt_mode: FawtMode,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, seed: u64) -> Self {
        Self {
            kind,
            dpp_v: DEFAULT_DPP_V,
            fawt_mode: FawtMode::PrioritizeViolators,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
enum Inner {
    Index {
        tables: Vec<IndexTable>,
    },
    Fawt {
        whittle: Vec<IndexTable>,
        mode: FawtMode,
        penalty_sum: Vec<f64>,
        steps: u64,
    },
    Dpp {
        v: f64,
        queues: Vec<f64>,
    },
    Random {
        rng: Box<ChaCha8Rng>,
    },
}

/// Mutable per-run policy state.
#[derive(Debug, Clone)]
pub struct PolicyState {
    kind: PolicyKind,
    inner: Inner,
    groups: Vec<usize>,
    negative_index_activations: u64,
}

fn check_tables(system: &SystemSpec, tables: Option<&[IndexTable]>, what: &str) -> Result<Vec<IndexTable>> {
    let tables = tables.ok_or_else(|| Error::Policy(format!("{what} index tables are required")))?;
    if tables.len() != system.num_groups() {
        return Err(Error::Policy(format!(
            "{} {what} index tables for {} arm groups",
            tables.len(),
            system.num_groups()
        )));
    }
    for (n, (t, arm)) in tables.iter().zip(system.group_arms()).enumerate() {
        if t.num_states() != arm.num_states() {
            return Err(Error::Policy(format!(
                "{what} index table {n} has the wrong number of states"
            )));
        }
    }
    Ok(tables.to_vec())
}

impl PolicyState {
    /// Index tables are per group (one per distinct arm of the base system).
    pub fn new(
        config: &PolicyConfig,
        system: &SystemSpec,
        pow_tables: Option<&[IndexTable]>,
        whittle_tables: Option<&[IndexTable]>,
    ) -> Result<Self> {
        let n = system.num_arms();
        let inner = match config.kind {
            PolicyKind::Pow => Inner::Index {
                tables: check_tables(system, pow_tables, "POW")?,
            },
            PolicyKind::Whittle => Inner::Index {
                tables: check_tables(system, whittle_tables, "Whittle")?,
            },
            PolicyKind::Fawt => Inner::Fawt {
                whittle: check_tables(system, whittle_tables, "Whittle")?,
                mode: config.fawt_mode,
                penalty_sum: vec![0.0; n],
                steps: 0,
            },
            PolicyKind::Dpp => {
                if !(config.dpp_v > 0.0 && config.dpp_v.is_finite()) {
                    return Err(Error::Policy(format!(
                        "DPP weight V = {} must be positive",
                        config.dpp_v
                    )));
                }
                Inner::Dpp {
                    v: config.dpp_v,
                    queues: vec![0.0; n],
                }
            }
            PolicyKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(POLICY_STREAM);
                Inner::Random { rng: Box::new(rng) }
            }
        };
        Ok(Self {
            kind: config.kind,
            inner,
            groups: (0..n).map(|i| system.group_of(i)).collect(),
            negative_index_activations: 0,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    /// DPP virtual queues; empty for other policies.
    pub fn queues(&self) -> &[f64] {
        match &self.inner {
            Inner::Dpp { queues, .. } => queues,
            _ => &[],
        }
    }

    /// Running mean penalty per arm tracked by FaWT; empty for other
    /// policies.
    pub fn tracker(&self) -> Vec<f64> {
        match &self.inner {
            Inner::Fawt { penalty_sum, steps, .. } => penalty_sum
                .iter()
                .map(|s| if *steps == 0 { 0.0 } else { s / *steps as f64 })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Activations that index policies were forced to spend on arms with a
    /// negative index.
    pub fn negative_index_activations(&self) -> u64 {
        self.negative_index_activations
    }

    /// Chooses the actions for `states` and advances the policy's own
    /// bookkeeping (queues, trackers) with the penalties those actions
    /// incur.
    pub fn step(&mut self, system: &SystemSpec, states: &[usize]) -> Result<Vec<bool>> {
        let n = system.num_arms();
        if states.len() != n || self.groups.len() != n {
            return Err(Error::Policy(format!(
                "joint state has {} entries for {n} arms",
                states.len()
            )));
        }
        let c = system.capacity;
        let groups = &self.groups;
        let actions = match &mut self.inner {
            Inner::Index { tables } => {
                let scores: Vec<f64> = (0..n).map(|i| tables[groups[i]].index[states[i]]).collect();
                let act = select_top_c(&scores, c)?;
                self.negative_index_activations +=
                    act.iter().zip(&scores).filter(|(a, s)| **a && **s < 0.0).count() as u64;
                act
            }
            Inner::Fawt {
                whittle,
                mode,
                penalty_sum,
                steps,
            } => {
                let scores: Vec<f64> = (0..n).map(|i| whittle[groups[i]].index[states[i]]).collect();
                let excess: Vec<f64> = (0..n)
                    .map(|i| {
                        let mean = if *steps == 0 {
                            0.0
                        } else {
                            penalty_sum[i] / *steps as f64
                        };
                        mean - system.arms[i].budget()
                    })
                    .collect();
                let act = fawt_select(&scores, &excess, *mode, c);
                for i in 0..n {
                    penalty_sum[i] += system.arms[i].penalty(states[i], act[i] as usize);
                }
                *steps += 1;
                act
            }
            Inner::Dpp { v, queues } => {
                let scores: Vec<f64> = (0..n)
                    .map(|i| {
                        let arm = &system.arms[i];
                        let s = states[i];
                        *v * (arm.reward(s, 1) - arm.reward(s, 0)) - queues[i] * (arm.penalty(s, 1) - arm.penalty(s, 0))
                    })
                    .collect();
                let act = select_top_c(&scores, c)?;
                for i in 0..n {
                    let arm = &system.arms[i];
                    queues[i] = dpp_queue_update(queues[i], arm.penalty(states[i], act[i] as usize), arm.budget());
                }
                act
            }
            Inner::Random { rng } => {
                if c > n {
                    return Err(Error::Policy(format!("capacity {c} exceeds the number of arms {n}")));
                }
                let mut act = vec![false; n];
                for i in sample(rng, n, c).iter() {
                    act[i] = true;
                }
                act
            }
        };
        debug_assert_eq!(actions.iter().filter(|a| **a).count(), c);
        Ok(actions)
    }
}

/// `max(0, Q + g - B)`.
#[inline]
pub fn dpp_queue_update(q: f64, penalty: f64, budget: f64) -> f64 {
    (q + penalty - budget).max(0.0)
}

/// FaWT choice given Whittle scores and running penalty excess
/// (`mean g - B`, positive for violators).
pub fn fawt_select(scores: &[f64], excess: &[f64], mode: FawtMode, capacity: usize) -> Vec<bool> {
    let n = scores.len();
    let by_index = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let (mut violators, mut rest): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| excess[i] > 0.0);
    let order: Vec<usize> = match mode {
        FawtMode::PrioritizeViolators => {
            violators.sort_by(|a, b| excess[*b].total_cmp(&excess[*a]).then_with(|| by_index(a, b)));
            rest.sort_by(by_index);
            violators.into_iter().chain(rest).collect()
        }
        FawtMode::ExcludeViolators => {
            rest.sort_by(by_index);
            // forced fill: least-violating first
            violators.sort_by(|a, b| excess[*a].total_cmp(&excess[*b]).then_with(|| by_index(a, b)));
            rest.into_iter().chain(violators).collect()
        }
    };
    let mut act = vec![false; n];
    for &i in order.iter().take(capacity) {
        act[i] = true;
    }
    act
}
