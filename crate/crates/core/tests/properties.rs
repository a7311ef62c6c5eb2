mod common;

use pow_rmab::arm::{arm_lagrangian_value, policy_iteration, solve_dual_mu_lp};
use pow_rmab::fluid::{fluid_trajectory, FluidState};
use pow_rmab::index::{Clamp, IndexTable};
use pow_rmab::model::{replicate_system, validate_arm, SystemSpec};
use pow_rmab::policies::{dpp_queue_update, select_top_c, PolicyConfig, PolicyKind, PolicyState};
use proptest::prelude::*;
use rand::Rng;

fn random_system(seed: u64, arms: usize, states: usize, capacity: usize) -> SystemSpec {
    let mut rng = common::rng(seed);
    let arms = (0..arms).map(|_| common::random_arm(&mut rng, states)).collect();
    SystemSpec::new(arms, capacity, 0.9).unwrap()
}

fn random_tables(seed: u64, system: &SystemSpec) -> Vec<IndexTable> {
    let mut rng = common::rng(seed ^ 0x5eed);
    system
        .group_arms()
        .map(|arm| {
            let n = arm.num_states();
            IndexTable {
                // coarse values so ties occur
                index: (0..n).map(|_| (rng.random_range(-4..8) as f64) * 0.25).collect(),
                clamped: vec![Clamp::None; n],
                indexable: true,
                search_bound: 10.0,
                resolution: 1e-4,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kernel_rows_are_stochastic(seed in any::<u64>(), states in 2usize..7, k in 1usize..4) {
        let sys = random_system(seed, 2, states, 1);
        let rep = replicate_system(&sys, k).unwrap();
        prop_assert_eq!(rep.num_arms(), 2 * k);
        for arm in &rep.arms {
            prop_assert!(validate_arm(arm).is_empty());
            for s in 0..arm.num_states() {
                for a in 0..2 {
                    let row = arm.kernel_row(s, a);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(row.iter().all(|p| *p >= 0.0));
                }
            }
        }
    }

    #[test]
    fn policy_iteration_is_a_bellman_fixed_point(
        seed in any::<u64>(),
        states in 2usize..7,
        lambda in -2.0f64..2.0,
        mu in 0.0f64..5.0,
        beta in 0.5f64..0.99,
    ) {
        let arm = common::random_arm(&mut common::rng(seed), states);
        let vf = policy_iteration(&arm, lambda, mu, beta, vec![false; states]).unwrap();
        prop_assert!(vf.bellman_residual(&arm, beta) <= 1e-8);
    }

    #[test]
    fn capacity_is_met_exactly(
        seed in any::<u64>(),
        arms in 2usize..7,
        states in 2usize..5,
        cap_frac in 0.0f64..1.0,
        policy in 0usize..5,
    ) {
        let capacity = 1 + ((arms - 1) as f64 * cap_frac) as usize;
        let sys = random_system(seed, arms, states, capacity.min(arms - 1).max(1));
        let tables = random_tables(seed, &sys);
        let kind = PolicyKind::ALL[policy];
        let cfg = PolicyConfig::new(kind, seed);
        let mut ps = PolicyState::new(&cfg, &sys, Some(&tables), Some(&tables)).unwrap();
        let mut rng = common::rng(seed.wrapping_add(1));
        for _ in 0..20 {
            let st: Vec<usize> = (0..arms).map(|_| rng.random_range(0..states)).collect();
            let act = ps.step(&sys, &st).unwrap();
            prop_assert_eq!(act.len(), arms);
            prop_assert_eq!(act.iter().filter(|a| **a).count(), sys.capacity);
            prop_assert!(ps.queues().iter().all(|q| *q >= 0.0));
        }
    }

    #[test]
    fn top_c_picks_highest_scores(scores in prop::collection::vec(-5.0f64..5.0, 1..12), c in 0usize..12) {
        let c = c.min(scores.len());
        let act = select_top_c(&scores, c).unwrap();
        prop_assert_eq!(act.iter().filter(|a| **a).count(), c);
        let lowest_in = scores.iter().zip(&act).filter(|(_, a)| **a).map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
        let highest_out = scores.iter().zip(&act).filter(|(_, a)| !**a).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lowest_in >= highest_out);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn arm_dual_lp_has_no_gap(seed in any::<u64>(), states in 2usize..6, lambda in -1.0f64..1.5) {
        let arm = common::random_arm(&mut common::rng(seed), states);
        let sol = solve_dual_mu_lp(&arm, lambda, 0.9, 5.0).unwrap();
        prop_assert!((0.0..=5.0).contains(&sol.mu_star));
        let l = arm_lagrangian_value(&arm, lambda, sol.mu_star, 0.9).unwrap();
        prop_assert!((l - sol.dual_objective).abs() <= 1e-6, "{} vs {}", l, sol.dual_objective);
        prop_assert!(sol.value_fn.bellman_residual(&arm, 0.9) <= 1e-8);
    }

    #[test]
    fn dpp_queues_stay_nonnegative(
        steps in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..200),
        q0 in 0.0f64..3.0,
    ) {
        let mut q = q0;
        for (g, b) in steps {
            let next = dpp_queue_update(q, g, b);
            prop_assert!(next >= 0.0);
            prop_assert!(next >= q + g - b - 1e-15);
            q = next;
        }
    }

    #[test]
    fn fluid_trajectories_conserve_mass(
        seed in any::<u64>(),
        arms in 2usize..5,
        states in 2usize..5,
        k in 1usize..3,
    ) {
        let base = random_system(seed, arms, states, 1);
        let sys = replicate_system(&base, k).unwrap();
        let tables = random_tables(seed, &sys);
        let tr = fluid_trajectory(&sys, &tables, &FluidState::initial(&sys), 50).unwrap();
        for st in &tr.states {
            prop_assert!(st.invariant_residual() <= 1e-9);
            prop_assert!(st.active_mass() <= 1.0 + 1e-9);
        }
    }
}
