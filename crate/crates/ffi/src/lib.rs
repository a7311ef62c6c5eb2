//! C ABI over the solver library.
//!
//! Handles are opaque and owned by the caller once returned; free them with
//! the matching `*_free`. Every fallible call returns a [`PowStatus`]. On a
//! non-OK status, [`pow_last_error_message`] holds a description for the
//! calling thread until the next call that fails.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use pow_rmab::arm::solve_dual_mu_lp;
use pow_rmab::cli::{experiment_spec, RunConfig};
use pow_rmab::fluid::{solve_exact_joint, solve_fluid_relaxed, FluidState};
use pow_rmab::index::{default_search_bound, pow_index_table, whittle_index_table};
use pow_rmab::model::{validate_arm, ArmModel, SystemSpec};
use pow_rmab::policies::PolicyKind;
use pow_rmab::sim::run_experiment;
use pow_rmab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidModel = 3,
    SolverFailure = 4,
    ConfigError = 5,
    Panic = 6,
}

/// A single arm: rewards, penalties, kernel, budget and initial law.
pub struct PowArm {
    inner: ArmModel,
}

/// A system built from a TOML run config.
pub struct PowSystem {
    config: RunConfig,
    system: SystemSpec,
}

/// Monte-Carlo summary of one policy at one replication factor.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PowSimSummary {
    pub reward_per_unit_mean: f64,
    pub reward_per_unit_std: f64,
    pub discounted_reward_per_unit_mean: f64,
    pub mean_violation_mean: f64,
    pub mean_violation_std: f64,
    pub discounted_mean_violation_mean: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> PowStatus {
    match err {
        Error::InvalidModel(_) => PowStatus::InvalidModel,
        Error::InvalidArgument(_) | Error::Policy(_) | Error::SizeGuard { .. } => PowStatus::InvalidArgument,
        Error::Config { .. } => PowStatus::ConfigError,
        _ => PowStatus::SolverFailure,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> PowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PowStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for `{what}`"));
            PowStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PowStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn as_out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn as_slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

fn pairs(flat: &[f64]) -> Vec<[f64; 2]> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Builds an arm with `num_states` states.
///
/// `reward` and `penalty` hold `2 * num_states` values, row-major by state
/// (passive then active). `kernel` holds `2 * num_states^2` values laid out
/// as `[action][from][to]`. `init_dist` holds `num_states` values. Only
/// shapes are checked here; see [`pow_arm_validate`].
///
/// # Safety
/// Every pointer must be valid for the stated number of reads; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pow_arm_new(
    num_states: usize,
    reward: *const f64,
    penalty: *const f64,
    kernel: *const f64,
    budget: f64,
    init_dist: *const f64,
    out: *mut *mut PowArm,
) -> PowStatus {
    guard(|| {
        let out = as_out(out, "out")?;
        *out = ptr::null_mut();
        if num_states == 0 {
            return Err(Error::InvalidModel("arm has no states".into()).into());
        }
        let reward = pairs(as_slice(reward, 2 * num_states, "reward")?);
        let penalty = pairs(as_slice(penalty, 2 * num_states, "penalty")?);
        let kernel = as_slice(kernel, 2 * num_states * num_states, "kernel")?.to_vec();
        let init = as_slice(init_dist, num_states, "init_dist")?.to_vec();
        let inner = ArmModel::new(reward, penalty, kernel, budget, init)?;
        *out = Box::into_raw(Box::new(PowArm { inner }));
        Ok(())
    })
}

/// # Safety
/// `arm` must come from this library and not have been freed; null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn pow_arm_free(arm: *mut PowArm) {
    if !arm.is_null() {
        drop(Box::from_raw(arm));
    }
}

/// # Safety
/// `arm` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pow_arm_num_states(arm: *const PowArm, out: *mut usize) -> PowStatus {
    guard(|| {
        *as_out(out, "out")? = as_ref(arm, "arm")?.inner.num_states();
        Ok(())
    })
}

/// Checks stochasticity, finiteness and budget sign. Returns
/// `POW_STATUS_INVALID_MODEL` with the findings as the error message.
///
/// # Safety
/// `arm` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pow_arm_validate(arm: *const PowArm) -> PowStatus {
    guard(|| {
        let report = validate_arm(&as_ref(arm, "arm")?.inner);
        if report.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(report.to_string()).into())
        }
    })
}

unsafe fn write_index(
    arm: *const PowArm,
    out: *mut f64,
    out_len: usize,
    table: impl FnOnce(&ArmModel) -> pow_rmab::Result<pow_rmab::index::IndexTable>,
) -> Outcome {
    let arm = &as_ref(arm, "arm")?.inner;
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    if out_len < arm.num_states() {
        return Err(
            Error::InvalidArgument(format!("output holds {out_len} values, arm has {}", arm.num_states())).into(),
        );
    }
    let t = table(arm)?;
    slice::from_raw_parts_mut(out, t.index.len()).copy_from_slice(&t.index);
    Ok(())
}

/// Penalty-optimal indices, one per state, with multiplier cap `mu_cap`.
/// A non-positive `search_bound` selects the default bound.
///
/// # Safety
/// `arm` must be live and `out` writable for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn pow_arm_pow_index(
    arm: *const PowArm,
    discount: f64,
    mu_cap: f64,
    search_bound: f64,
    resolution: f64,
    out: *mut f64,
    out_len: usize,
) -> PowStatus {
    guard(|| {
        write_index(arm, out, out_len, |a| {
            let m = if search_bound > 0.0 {
                search_bound
            } else {
                default_search_bound(a, discount, mu_cap)
            };
            pow_index_table(a, discount, mu_cap, m, resolution)
        })
    })
}

/// Whittle indices (the penalty is ignored), one per state.
///
/// # Safety
/// `arm` must be live and `out` writable for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn pow_arm_whittle_index(
    arm: *const PowArm,
    discount: f64,
    search_bound: f64,
    resolution: f64,
    out: *mut f64,
    out_len: usize,
) -> PowStatus {
    guard(|| {
        write_index(arm, out, out_len, |a| {
            let m = if search_bound > 0.0 {
                search_bound
            } else {
                default_search_bound(a, discount, 0.0)
            };
            whittle_index_table(a, discount, m, resolution)
        })
    })
}

/// Optimal penalty multiplier at activation price `lambda`, and the dual
/// objective.
///
/// # Safety
/// `arm` must be live; `mu_out` writable; `objective_out` writable or null.
#[no_mangle]
pub unsafe extern "C" fn pow_arm_dual_mu(
    arm: *const PowArm,
    lambda: f64,
    discount: f64,
    mu_cap: f64,
    mu_out: *mut f64,
    objective_out: *mut f64,
) -> PowStatus {
    guard(|| {
        let arm = &as_ref(arm, "arm")?.inner;
        let mu_out = as_out(mu_out, "mu_out")?;
        let sol = solve_dual_mu_lp(arm, lambda, discount, mu_cap)?;
        *mu_out = sol.mu_star;
        if let Some(o) = objective_out.as_mut() {
            *o = sol.dual_objective;
        }
        Ok(())
    })
}

/// Parses a run config (the same TOML the command-line tool reads) and
/// builds its system.
///
/// # Safety
/// `toml` must be a NUL-terminated UTF-8 string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pow_system_from_toml(toml: *const c_char, out: *mut *mut PowSystem) -> PowStatus {
    guard(|| {
        let out = as_out(out, "out")?;
        *out = ptr::null_mut();
        if toml.is_null() {
            return Err(Failure::Null("toml"));
        }
        let text = CStr::from_ptr(toml)
            .to_str()
            .map_err(|e| Error::InvalidArgument(format!("config is not UTF-8: {e}")))?;
        let config = RunConfig::from_toml(text)?;
        let system = config.system()?;
        *out = Box::into_raw(Box::new(PowSystem { config, system }));
        Ok(())
    })
}

/// # Safety
/// `system` must come from this library and not have been freed; null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn pow_system_free(system: *mut PowSystem) {
    if !system.is_null() {
        drop(Box::from_raw(system));
    }
}

/// # Safety
/// `system` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pow_system_num_arms(system: *const PowSystem, out: *mut usize) -> PowStatus {
    guard(|| {
        *as_out(out, "out")? = as_ref(system, "system")?.system.num_arms();
        Ok(())
    })
}

/// # Safety
/// `system` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pow_system_capacity(system: *const PowSystem, out: *mut usize) -> PowStatus {
    guard(|| {
        *as_out(out, "out")? = as_ref(system, "system")?.system.capacity;
        Ok(())
    })
}

/// Copies arm `index` into a new handle.
///
/// # Safety
/// `system` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pow_system_arm(system: *const PowSystem, index: usize, out: *mut *mut PowArm) -> PowStatus {
    guard(|| {
        let out = as_out(out, "out")?;
        *out = ptr::null_mut();
        let system = &as_ref(system, "system")?.system;
        let arm = system.arms.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("arm {index} out of range for {} arms", system.num_arms()))
        })?;
        *out = Box::into_raw(Box::new(PowArm { inner: arm.clone() }));
        Ok(())
    })
}

/// Relaxed fluid optimum (discounted, multipliers capped at the configured
/// `U`) and its capacity price.
///
/// # Safety
/// `system` must be live; `objective_out` writable; `lambda_out` writable or
/// null.
#[no_mangle]
pub unsafe extern "C" fn pow_system_fluid_relaxed(
    system: *const PowSystem,
    objective_out: *mut f64,
    lambda_out: *mut f64,
) -> PowStatus {
    guard(|| {
        let sys = as_ref(system, "system")?;
        let objective_out = as_out(objective_out, "objective_out")?;
        let sol = solve_fluid_relaxed(&sys.system, &FluidState::initial(&sys.system), Some(sys.config.u_cap()))?;
        *objective_out = sol.objective;
        if let Some(l) = lambda_out.as_mut() {
            *l = sol.lambda_star;
        }
        Ok(())
    })
}

/// Exact constrained optimum of the joint system over randomized stationary
/// policies. Fails with `POW_STATUS_INVALID_ARGUMENT` when the joint state
/// space exceeds the size guard.
///
/// # Safety
/// `system` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pow_system_exact_joint(system: *const PowSystem, out: *mut f64) -> PowStatus {
    guard(|| {
        let sys = as_ref(system, "system")?;
        let out = as_out(out, "out")?;
        *out = solve_exact_joint(&sys.system)?;
        Ok(())
    })
}

/// Simulates `policy` ("pow", "whittle", "fawt", "dpp" or "random") on the
/// system replicated `k` times, over `runs` seeded runs of `horizon` steps.
///
/// # Safety
/// `system` must be live, `policy` NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pow_simulate(
    system: *const PowSystem,
    policy: *const c_char,
    k: usize,
    runs: usize,
    horizon: usize,
    seed: u64,
    out: *mut PowSimSummary,
) -> PowStatus {
    guard(|| {
        let sys = as_ref(system, "system")?;
        let out = as_out(out, "out")?;
        if policy.is_null() {
            return Err(Failure::Null("policy"));
        }
        let name = CStr::from_ptr(policy)
            .to_str()
            .map_err(|e| Error::InvalidArgument(format!("policy name is not UTF-8: {e}")))?;
        let kind: PolicyKind = name.parse()?;
        if k == 0 || runs == 0 || horizon == 0 {
            return Err(Error::InvalidArgument("k, runs and horizon must be positive".into()).into());
        }
        let mut config = sys.config.clone();
        config.experiment.policy = None;
        config.experiment.policies = Some(vec![kind]);
        config.experiment.runs = runs;
        config.experiment.horizon = horizon;
        config.experiment.seed = seed;
        let result = run_experiment(&experiment_spec(&config, vec![k])?)?;
        let s = &result.cells[0].stats;
        *out = PowSimSummary {
            reward_per_unit_mean: s.reward_per_unit.mean,
            reward_per_unit_std: s.reward_per_unit.std,
            discounted_reward_per_unit_mean: s.discounted_reward_per_unit.mean,
            mean_violation_mean: s.mean_violation.mean,
            mean_violation_std: s.mean_violation.std,
            discounted_mean_violation_mean: s.discounted_mean_violation.mean,
        };
        Ok(())
    })
}

/// Message for the calling thread's most recent failure, or null. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pow_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}
