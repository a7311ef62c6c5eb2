use std::ffi::{CStr, CString};
use std::ptr;

use pow_rmab_ffi::*;

const TOML: &str = r#"
[scenario]
kind = "throughput_activation"
theta0 = [0.3, 0.9]
theta1 = [0.02, 0.02]
delta = [0.35, 0.05]

[experiment]
policy = "pow"
"#;

fn last_error() -> String {
    let p = pow_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Two-state arm: state 1 pays 1 when active, activation resets to 0.
fn toy_arm() -> *mut PowArm {
    let reward = [0.0, 0.0, 0.0, 1.0];
    let penalty = [0.0, 0.5, 0.0, 0.5];
    // [action][from][to]
    let kernel = [0.5, 0.5, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let init = [0.5, 0.5];
    let mut arm = ptr::null_mut();
    let st = unsafe {
        pow_arm_new(
            2,
            reward.as_ptr(),
            penalty.as_ptr(),
            kernel.as_ptr(),
            0.3,
            init.as_ptr(),
            &mut arm,
        )
    };
    assert_eq!(st, PowStatus::Ok);
    assert!(!arm.is_null());
    arm
}

#[test]
fn arm_round_trip_and_indices() {
    let arm = toy_arm();
    unsafe {
        let mut n = 0;
        assert_eq!(pow_arm_num_states(arm, &mut n), PowStatus::Ok);
        assert_eq!(n, 2);
        assert_eq!(pow_arm_validate(arm), PowStatus::Ok);

        let mut pow = [0.0; 2];
        let mut whittle = [0.0; 2];
        assert_eq!(
            pow_arm_pow_index(arm, 0.9, 5.0, 0.0, 1e-5, pow.as_mut_ptr(), 2),
            PowStatus::Ok
        );
        assert_eq!(
            pow_arm_whittle_index(arm, 0.9, 0.0, 1e-5, whittle.as_mut_ptr(), 2),
            PowStatus::Ok
        );
        assert!(whittle[1] > whittle[0]);
        // A penalty charged on activation can only lower the index.
        for s in 0..2 {
            assert!(pow[s] <= whittle[s] + 1e-4, "state {s}: {} > {}", pow[s], whittle[s]);
        }

        let mut mu = -1.0;
        let mut obj = f64::NAN;
        assert_eq!(pow_arm_dual_mu(arm, 0.0, 0.9, 5.0, &mut mu, &mut obj), PowStatus::Ok);
        assert!((0.0..=5.0).contains(&mu));
        assert!(obj.is_finite());
        assert_eq!(
            pow_arm_dual_mu(arm, 0.0, 0.9, 5.0, &mut mu, ptr::null_mut()),
            PowStatus::Ok
        );

        let mut short = [0.0; 1];
        assert_eq!(
            pow_arm_pow_index(arm, 0.9, 5.0, 0.0, 1e-5, short.as_mut_ptr(), 1),
            PowStatus::InvalidArgument
        );
        pow_arm_free(arm);
    }
}

#[test]
fn invalid_inputs_report_status_and_message() {
    unsafe {
        let mut n = 0;
        assert_eq!(pow_arm_num_states(ptr::null(), &mut n), PowStatus::NullPointer);
        assert!(last_error().contains("arm"));

        let reward = [0.0; 4];
        let kernel = [0.7, 0.7, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let init = [1.0, 0.0];
        let mut arm = ptr::null_mut();
        let st = pow_arm_new(
            2,
            reward.as_ptr(),
            reward.as_ptr(),
            kernel.as_ptr(),
            0.1,
            init.as_ptr(),
            &mut arm,
        );
        assert_eq!(st, PowStatus::Ok);
        assert_eq!(pow_arm_validate(arm), PowStatus::InvalidModel);
        assert!(!last_error().is_empty());
        pow_arm_free(arm);

        assert_eq!(
            pow_arm_new(
                0,
                reward.as_ptr(),
                reward.as_ptr(),
                kernel.as_ptr(),
                0.1,
                init.as_ptr(),
                &mut arm
            ),
            PowStatus::InvalidModel
        );
        assert!(arm.is_null());
        pow_arm_free(ptr::null_mut());
        pow_system_free(ptr::null_mut());
    }
}

#[test]
fn system_queries_and_simulation() {
    let toml = CString::new(TOML).unwrap();
    let mut sys = ptr::null_mut();
    unsafe {
        assert_eq!(pow_system_from_toml(toml.as_ptr(), &mut sys), PowStatus::Ok);
        let (mut n, mut c) = (0, 0);
        assert_eq!(pow_system_num_arms(sys, &mut n), PowStatus::Ok);
        assert_eq!(pow_system_capacity(sys, &mut c), PowStatus::Ok);
        assert_eq!((n, c), (2, 1));

        let mut arm = ptr::null_mut();
        assert_eq!(pow_system_arm(sys, 1, &mut arm), PowStatus::Ok);
        let mut states = 0;
        assert_eq!(pow_arm_num_states(arm, &mut states), PowStatus::Ok);
        assert_eq!(states, 50);
        pow_arm_free(arm);
        assert_eq!(pow_system_arm(sys, 2, &mut arm), PowStatus::InvalidArgument);

        let (mut obj, mut lambda) = (0.0, f64::NAN);
        assert_eq!(pow_system_fluid_relaxed(sys, &mut obj, &mut lambda), PowStatus::Ok);
        assert!(obj > 0.0 && lambda >= 0.0);

        let mut summary = PowSimSummary::default();
        let pol = CString::new("pow").unwrap();
        assert_eq!(
            pow_simulate(sys, pol.as_ptr(), 2, 3, 500, 7, &mut summary),
            PowStatus::Ok
        );
        assert!(summary.reward_per_unit_mean > 0.0);
        assert!(summary.mean_violation_mean >= 0.0);
        let mut again = PowSimSummary::default();
        assert_eq!(pow_simulate(sys, pol.as_ptr(), 2, 3, 500, 7, &mut again), PowStatus::Ok);
        assert_eq!(summary.reward_per_unit_mean, again.reward_per_unit_mean);

        let bad = CString::new("greedy").unwrap();
        assert_eq!(
            pow_simulate(sys, bad.as_ptr(), 1, 1, 10, 0, &mut summary),
            PowStatus::InvalidArgument
        );
        assert!(last_error().contains("greedy"));
        pow_system_free(sys);
    }
}

#[test]
fn exact_joint_and_size_guard() {
    let rs = CString::new("[scenario]\nkind = \"remote_sensing\"\np = [0.5, 0.7]\nbudgets = [0.6, 0.6]\n").unwrap();
    let big = CString::new(
        TOML.replace("[0.3, 0.9]", "[0.3, 0.5, 0.9]")
            .replace("[0.02, 0.02]", "[0.02, 0.02, 0.02]")
            .replace("[0.35, 0.05]", "[0.35, 0.2, 0.05]"),
    )
    .unwrap();
    unsafe {
        let mut sys = ptr::null_mut();
        assert_eq!(pow_system_from_toml(rs.as_ptr(), &mut sys), PowStatus::Ok);
        let (mut exact, mut fluid) = (0.0, 0.0);
        assert_eq!(pow_system_exact_joint(sys, &mut exact), PowStatus::Ok);
        assert_eq!(
            pow_system_fluid_relaxed(sys, &mut fluid, ptr::null_mut()),
            PowStatus::Ok
        );
        assert!(fluid >= exact - 1e-6, "fluid {fluid} < exact {exact}");
        pow_system_free(sys);

        assert_eq!(pow_system_from_toml(big.as_ptr(), &mut sys), PowStatus::Ok);
        assert_eq!(pow_system_exact_joint(sys, &mut exact), PowStatus::InvalidArgument);
        assert!(last_error().contains("limit"));
        pow_system_free(sys);
    }
}

#[test]
fn config_errors_map_to_config_status() {
    let toml = CString::new("[scenario]\nkind = \"throughput_activation\"\ntheta0 = [0.3]\n").unwrap();
    let mut sys = ptr::null_mut();
    unsafe {
        assert_eq!(pow_system_from_toml(toml.as_ptr(), &mut sys), PowStatus::ConfigError);
        assert!(sys.is_null());
        assert!(last_error().contains("scenario"));
        assert_eq!(pow_system_from_toml(ptr::null(), &mut sys), PowStatus::NullPointer);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pow_rmab.h")).unwrap();
    for name in [
        "pow_arm_new",
        "pow_arm_free",
        "pow_arm_num_states",
        "pow_arm_validate",
        "pow_arm_pow_index",
        "pow_arm_whittle_index",
        "pow_arm_dual_mu",
        "pow_system_from_toml",
        "pow_system_free",
        "pow_system_num_arms",
        "pow_system_capacity",
        "pow_system_arm",
        "pow_system_fluid_relaxed",
        "pow_system_exact_joint",
        "pow_simulate",
        "pow_last_error_message",
        "POW_STATUS_PANIC",
        "typedef struct PowArm PowArm",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
