#![allow(dead_code)]

use pow_rmab::model::{ArmModel, SystemSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense random arm: rewards in [0, 0.5) passive and [0, 1) active,
/// penalties in [0, 1), kernel rows with every entry at least 0.05 before
/// normalization, and a budget between the per-state minimum and maximum
/// penalty averages.
pub fn random_arm(rng: &mut ChaCha8Rng, num_states: usize) -> ArmModel {
    let reward: Vec<[f64; 2]> = (0..num_states)
        .map(|_| [rng.random_range(0.0..0.5), rng.random_range(0.0..1.0)])
        .collect();
    let penalty: Vec<[f64; 2]> = (0..num_states)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect();
    let mut kernel = Vec::with_capacity(2 * num_states * num_states);
    for _ in 0..2 * num_states {
        let w: Vec<f64> = (0..num_states).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = w.iter().sum();
        kernel.extend(w.iter().map(|x| x / total));
    }
    let n = num_states as f64;
    let gmin = penalty.iter().map(|g| g[0].min(g[1])).sum::<f64>() / n;
    let gmax = penalty.iter().map(|g| g[0].max(g[1])).sum::<f64>() / n;
    let budget = gmin + rng.random_range(0.3..0.8) * (gmax - gmin);
    ArmModel::new(reward, penalty, kernel, budget, vec![1.0 / n; num_states]).unwrap()
}

/// The ten tiny two-arm systems used for the bound-ordering check.
pub fn tiny_instances() -> Vec<SystemSpec> {
    let mut r = rng(2024);
    (0..10)
        .map(|i| {
            let ns = 2 + i % 2;
            let arms = (0..2).map(|_| random_arm(&mut r, ns)).collect();
            SystemSpec::new(arms, 1, 0.9).unwrap()
        })
        .collect()
}

/// Two identical arms. State 0 is rested, state 1 ready; a passive arm
/// moves to (or stays) ready, an active one goes back to rested. Only a
/// ready activation pays, and idling while ready costs a unit of penalty.
pub fn ready_rested_system() -> SystemSpec {
    let arm = ArmModel::new(
        vec![[0.0, 0.0], [0.0, 1.0]],
        vec![[0.0, 0.0], [1.0, 0.0]],
        vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0],
        0.9,
        vec![0.5, 0.5],
    )
    .unwrap();
    SystemSpec::new(vec![arm.clone(), arm], 1, 0.95).unwrap()
}

/// Arm whose next state ignores the action.
pub fn action_free_arm(rng: &mut ChaCha8Rng, num_states: usize) -> ArmModel {
    let base = random_arm(rng, num_states);
    let n = num_states;
    let mut kernel = base.kernel().to_vec();
    let passive: Vec<f64> = kernel[..n * n].to_vec();
    kernel[n * n..].copy_from_slice(&passive);
    ArmModel::new(
        base.rewards().to_vec(),
        base.penalties().to_vec(),
        kernel,
        base.budget(),
        base.init_dist().to_vec(),
    )
    .unwrap()
}

/// Same arm with the penalty removed.
pub fn penalty_free(arm: &ArmModel) -> ArmModel {
    ArmModel::new(
        arm.rewards().to_vec(),
        vec![[0.0, 0.0]; arm.num_states()],
        arm.kernel().to_vec(),
        0.0,
        arm.init_dist().to_vec(),
    )
    .unwrap()
}
