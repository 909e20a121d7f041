/* C interface to the fedssa simulator. Generated by cbindgen; do not edit. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status of a C-API call.
 */
typedef enum FedssaStatus {
  FEDSSA_STATUS_OK = 0,
  FEDSSA_STATUS_NULL_ARGUMENT = 1,
  FEDSSA_STATUS_INVALID_UTF8 = 2,
  FEDSSA_STATUS_INVALID_CONFIG = 3,
  FEDSSA_STATUS_RUNTIME_ERROR = 4,
  FEDSSA_STATUS_OUT_OF_RANGE = 5,
} FedssaStatus;

/**
 * Opaque experiment configuration handle.
 */
typedef struct FedssaConfig FedssaConfig;

/**
 * Opaque result handle for a completed run.
 */
typedef struct FedssaRunResult FedssaRunResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Most recent error message on this thread, or NULL. Caller frees the
 * returned string with `fedssa_string_free`.
 */
char *fedssa_last_error_message(void);

/**
 * Frees a string returned by this library.
 *
 * # Safety
 * `s` must be a pointer previously returned by a `fedssa_*` function that
 * documents this deallocator, or NULL.
 */
void fedssa_string_free(char *s);

/**
 * Parses a configuration from a JSON document (same schema as the CLI
 * config file; missing keys take their defaults).
 *
 * # Safety
 * `json` must be a valid NUL-terminated string; `out` must be a valid
 * pointer to write a handle into.
 */
enum FedssaStatus fedssa_config_from_json(const char *json, struct FedssaConfig **out);

/**
 * Creates the all-defaults configuration.
 *
 * # Safety
 * `out` must be a valid pointer to write a handle into.
 */
enum FedssaStatus fedssa_config_default(struct FedssaConfig **out);

/**
 * Serializes a configuration back to JSON. Caller frees with
 * `fedssa_string_free`.
 *
 * # Safety
 * `config` must be a live handle from this library.
 */
char *fedssa_config_to_json(const struct FedssaConfig *config);

/**
 * Frees a configuration handle.
 *
 * # Safety
 * `config` must be a handle from this library, not yet freed, or NULL.
 */
void fedssa_config_free(struct FedssaConfig *config);

/**
 * Runs the experiment in memory (no files are written) and returns a
 * result handle.
 *
 * # Safety
 * `config` must be a live handle; `out` must be valid to write into.
 */
enum FedssaStatus fedssa_run(const struct FedssaConfig *config, struct FedssaRunResult **out);

/**
 * Number of completed rounds in the result.
 *
 * # Safety
 * `result` must be a live handle; NULL yields 0.
 */
size_t fedssa_result_num_rounds(const struct FedssaRunResult *result);

/**
 * Mean test accuracy after round `round` (0-based). Writes NaN when no
 * client had a defined accuracy that round.
 *
 * # Safety
 * `result` must be a live handle; `out` must be valid to write into.
 */
enum FedssaStatus fedssa_result_mean_accuracy(const struct FedssaRunResult *result,
                                              size_t round,
                                              double *out);

/**
 * Mean test accuracy after the final round (the initial-model accuracy
 * when the run had zero rounds). Writes NaN when undefined.
 *
 * # Safety
 * `result` must be a live handle; `out` must be valid to write into.
 */
enum FedssaStatus fedssa_result_final_mean_accuracy(const struct FedssaRunResult *result,
                                                    double *out);

/**
 * Total parameters transmitted over the whole run (uplink plus downlink).
 *
 * # Safety
 * `result` must be a live handle; `out` must be valid to write into.
 */
enum FedssaStatus fedssa_result_cumulative_params(const struct FedssaRunResult *result,
                                                  uint64_t *out);

/**
 * Total estimated FLOPs over the whole run.
 *
 * # Safety
 * `result` must be a live handle; `out` must be valid to write into.
 */
enum FedssaStatus fedssa_result_cumulative_flops(const struct FedssaRunResult *result,
                                                 uint64_t *out);

/**
 * The round log as a JSON array (same rows as the CLI's JSON emitter).
 * Caller frees with `fedssa_string_free`; returns NULL on error.
 *
 * # Safety
 * `result` must be a live handle from this library.
 */
char *fedssa_result_rounds_json(const struct FedssaRunResult *result);

/**
 * Frees a result handle.
 *
 * # Safety
 * `result` must be a handle from this library, not yet freed, or NULL.
 */
void fedssa_result_free(struct FedssaRunResult *result);

/**
 * The stabilization coefficient `mu(t)` for the given schedule. Returns
 * NaN when `mu0` lies outside `[0, 1]`.
 */
double fedssa_mu_schedule(double mu0, uint64_t t_stable, uint64_t t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
