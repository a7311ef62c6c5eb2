#ifndef POW_RMAB_H
#define POW_RMAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PowStatus {
  POW_STATUS_OK = 0,
  POW_STATUS_NULL_POINTER = 1,
  POW_STATUS_INVALID_ARGUMENT = 2,
  POW_STATUS_INVALID_MODEL = 3,
  POW_STATUS_SOLVER_FAILURE = 4,
  POW_STATUS_CONFIG_ERROR = 5,
  POW_STATUS_PANIC = 6,
} PowStatus;

// A single arm: rewards, penalties, kernel, budget and initial law.
typedef struct PowArm PowArm;

// A system built from a TOML run config.
typedef struct PowSystem PowSystem;

// Monte-Carlo summary of one policy at one replication factor.
typedef struct PowSimSummary {
  double reward_per_unit_mean;
  double reward_per_unit_std;
  double discounted_reward_per_unit_mean;
  double mean_violation_mean;
  double mean_violation_std;
  double discounted_mean_violation_mean;
} PowSimSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Builds an arm with `num_states` states.
//
// `reward` and `penalty` hold `2 * num_states` values, row-major by state
// (passive then active). `kernel` holds `2 * num_states^2` values laid out
// as `[action][from][to]`. `init_dist` holds `num_states` values. Only
// shapes are checked here; see [`pow_arm_validate`].
//
// # Safety
// Every pointer must be valid for the stated number of reads; `out` must be
// writable.
enum PowStatus pow_arm_new(size_t num_states,
                           const double *reward,
                           const double *penalty,
                           const double *kernel,
                           double budget,
                           const double *init_dist,
                           struct PowArm **out);

// # Safety
// `arm` must come from this library and not have been freed; null is a
// no-op.
void pow_arm_free(struct PowArm *arm);

// # Safety
// `arm` must be a live handle and `out` writable.
enum PowStatus pow_arm_num_states(const struct PowArm *arm, size_t *out);

// Checks stochasticity, finiteness and budget sign. Returns
// `POW_STATUS_INVALID_MODEL` with the findings as the error message.
//
// # Safety
// `arm` must be a live handle.
enum PowStatus pow_arm_validate(const struct PowArm *arm);

// Penalty-optimal indices, one per state, with multiplier cap `mu_cap`.
// A non-positive `search_bound` selects the default bound.
//
// # Safety
// `arm` must be live and `out` writable for `out_len` values.
enum PowStatus pow_arm_pow_index(const struct PowArm *arm,
                                 double discount,
                                 double mu_cap,
                                 double search_bound,
                                 double resolution,
                                 double *out,
                                 size_t out_len);

// Whittle indices (the penalty is ignored), one per state.
//
// # Safety
// `arm` must be live and `out` writable for `out_len` values.
enum PowStatus pow_arm_whittle_index(const struct PowArm *arm,
                                     double discount,
                                     double search_bound,
                                     double resolution,
                                     double *out,
                                     size_t out_len);

// Optimal penalty multiplier at activation price `lambda`, and the dual
// objective.
//
// # Safety
// `arm` must be live; `mu_out` writable; `objective_out` writable or null.
enum PowStatus pow_arm_dual_mu(const struct PowArm *arm,
                               double lambda,
                               double discount,
                               double mu_cap,
                               double *mu_out,
                               double *objective_out);

// Parses a run config (the same TOML the command-line tool reads) and
// builds its system.
//
// # Safety
// `toml` must be a NUL-terminated UTF-8 string; `out` writable.
enum PowStatus pow_system_from_toml(const char *toml, struct PowSystem **out);

// # Safety
// `system` must come from this library and not have been freed; null is a
// no-op.
void pow_system_free(struct PowSystem *system);

// # Safety
// `system` must be live and `out` writable.
enum PowStatus pow_system_num_arms(const struct PowSystem *system, size_t *out);

// # Safety
// `system` must be live and `out` writable.
enum PowStatus pow_system_capacity(const struct PowSystem *system, size_t *out);

// Copies arm `index` into a new handle.
//
// # Safety
// `system` must be live and `out` writable.
enum PowStatus pow_system_arm(const struct PowSystem *system, size_t index, struct PowArm **out);

// Relaxed fluid optimum (discounted, multipliers capped at the configured
// `U`) and its capacity price.
//
// # Safety
// `system` must be live; `objective_out` writable; `lambda_out` writable or
// null.
enum PowStatus pow_system_fluid_relaxed(const struct PowSystem *system,
                                        double *objective_out,
                                        double *lambda_out);

// Exact constrained optimum of the joint system over randomized stationary
// policies. Fails with `POW_STATUS_INVALID_ARGUMENT` when the joint state
// space exceeds the size guard.
//
// # Safety
// `system` must be live and `out` writable.
enum PowStatus pow_system_exact_joint(const struct PowSystem *system, double *out);

// Simulates `policy` ("pow", "whittle", "fawt", "dpp" or "random") on the
// system replicated `k` times, over `runs` seeded runs of `horizon` steps.
//
// # Safety
// `system` must be live, `policy` NUL-terminated and `out` writable.
enum PowStatus pow_simulate(const struct PowSystem *system,
                            const char *policy,
                            size_t k,
                            size_t runs,
                            size_t horizon,
                            uint64_t seed,
                            struct PowSimSummary *out);

// Message for the calling thread's most recent failure, or null. The
// pointer stays valid until the next failing call on the same thread.
const char *pow_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POW_RMAB_H */
