#include <stdio.h>

#include "pow_rmab.h"

int main(void) {
    const char *config =
        "[scenario]\n"
        "kind = \"throughput_activation\"\n"
        "theta0 = [0.3, 0.9]\n"
        "theta1 = [0.02, 0.02]\n"
        "delta = [0.35, 0.05]\n";
    PowSystem *sys = NULL;
    if (pow_system_from_toml(config, &sys) != POW_STATUS_OK) {
        fprintf(stderr, "config: %s\n", pow_last_error_message());
        return 1;
    }
    double objective = 0.0, lambda = 0.0;
    if (pow_system_fluid_relaxed(sys, &objective, &lambda) != POW_STATUS_OK) {
        fprintf(stderr, "fluid: %s\n", pow_last_error_message());
        pow_system_free(sys);
        return 1;
    }
    printf("relaxed objective %.6f, capacity price %.6f\n", objective, lambda);

    PowSimSummary summary;
    if (pow_simulate(sys, "pow", 2, 4, 2000, 1, &summary) != POW_STATUS_OK) {
        fprintf(stderr, "simulate: %s\n", pow_last_error_message());
        pow_system_free(sys);
        return 1;
    }
    printf("reward per unit %.6f, mean violation %.6f\n", summary.reward_per_unit_mean, summary.mean_violation_mean);
    pow_system_free(sys);
    return 0;
}
