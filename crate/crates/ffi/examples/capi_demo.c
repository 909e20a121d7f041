/* Minimal C consumer of the fedssa library.
 *
 * Build (from the repository root, after `cargo build -p fedssa-ffi`):
 *   cc crates/ffi/examples/capi_demo.c -Icrates/ffi/include \
 *      target/debug/libfedssa_ffi.a -lm -lpthread -ldl -o capi_demo
 */

#include <stdio.h>

#include "fedssa.h"

static int check(FedssaStatus status, const char *what) {
    if (status != FEDSSA_STATUS_OK) {
        char *msg = fedssa_last_error_message();
        fprintf(stderr, "%s failed (%d): %s\n", what, (int)status, msg ? msg : "?");
        fedssa_string_free(msg);
        return 1;
    }
    return 0;
}

int main(void) {
    const char *config_json =
        "{\"dataset\": {\"kind\": \"blobs\", \"per_class_n\": 40, \"d_in\": 8,"
        " \"spread\": 0.5}, \"s\": 6, \"n\": 4, \"t\": 3, \"eta\": 0.05,"
        " \"zoo\": [{\"hidden\": [16], \"d_rep\": 8}], \"seed\": 7}";

    FedssaConfig *config = NULL;
    if (check(fedssa_config_from_json(config_json, &config), "config")) {
        return 1;
    }

    FedssaRunResult *result = NULL;
    if (check(fedssa_run(config, &result), "run")) {
        fedssa_config_free(config);
        return 1;
    }

    size_t rounds = fedssa_result_num_rounds(result);
    double final_acc = 0.0;
    uint64_t params = 0;
    uint64_t flops = 0;
    fedssa_result_final_mean_accuracy(result, &final_acc);
    fedssa_result_cumulative_params(result, &params);
    fedssa_result_cumulative_flops(result, &flops);
    printf("rounds=%zu final_mean_accuracy=%.4f params=%llu flops=%llu\n",
           rounds, final_acc, (unsigned long long)params, (unsigned long long)flops);
    printf("mu(t=0)=%.3f mu(t=25)=%.3f mu(t=26)=%.3f (mu0=0.5, t_stable=25)\n",
           fedssa_mu_schedule(0.5, 25, 0), fedssa_mu_schedule(0.5, 25, 25),
           fedssa_mu_schedule(0.5, 25, 26));

    fedssa_result_free(result);
    fedssa_config_free(config);
    return 0;
}
