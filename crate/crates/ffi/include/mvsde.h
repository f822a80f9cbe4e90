#ifndef MVSDE_H
#define MVSDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call. Zero is success.
 */
typedef enum MvsdeStatus {
  MVSDE_STATUS_OK = 0,
  MVSDE_STATUS_NULL_POINTER = 1,
  MVSDE_STATUS_INVALID_ARGUMENT = 2,
  MVSDE_STATUS_CONFIG = 3,
  MVSDE_STATUS_NON_FINITE = 4,
  MVSDE_STATUS_NEWTON_FAILURE = 5,
  MVSDE_STATUS_DIMENSION_MISMATCH = 6,
  MVSDE_STATUS_OUT_OF_RANGE = 7,
  MVSDE_STATUS_IO = 8,
  MVSDE_STATUS_PANIC = 9,
} MvsdeStatus;

/**
 * Experiment configuration handle.
 */
typedef struct MvsdeConfig MvsdeConfig;

/**
 * Convergence report handle.
 */
typedef struct MvsdeConvergence MvsdeConvergence;

/**
 * Terminal particle states of one simulation.
 */
typedef struct MvsdeEnsemble MvsdeEnsemble;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next `mvsde_*` call on the same thread.
 */
const char *mvsde_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mvsde_version(void);

/**
 * Creates a configuration with the desk-scale defaults.
 *
 * # Safety
 * `out` must be null or valid for a pointer write.
 */
enum MvsdeStatus mvsde_config_new(struct MvsdeConfig **out);

/**
 * Parses configuration text (the same format as the CLI config files).
 *
 * # Safety
 * `text` must be null or NUL-terminated; `out` must be null or valid for a pointer write.
 */
enum MvsdeStatus mvsde_config_parse(const char *text, struct MvsdeConfig **out);

/**
 * # Safety
 * `cfg` must be null or a live handle from this library.
 */
enum MvsdeStatus mvsde_config_set_seed(struct MvsdeConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be null or a live handle from this library.
 */
enum MvsdeStatus mvsde_config_set_particles(struct MvsdeConfig *cfg, uintptr_t n);

/**
 * # Safety
 * `cfg` must be null or a handle from this library that is not used afterwards.
 */
void mvsde_config_free(struct MvsdeConfig *cfg);

/**
 * Runs the strong-error study described by `cfg`.
 *
 * # Safety
 * `cfg` must be null or a live handle; `out` must be null or valid for a pointer write.
 */
enum MvsdeStatus mvsde_run_convergence(const struct MvsdeConfig *cfg,
                                       struct MvsdeConvergence **out);

/**
 * Number of schemes in the report; 0 for a null handle.
 *
 * # Safety
 * `rep` must be null or a live handle.
 */
uintptr_t mvsde_convergence_scheme_count(const struct MvsdeConvergence *rep);

/**
 * Number of step sizes per scheme; 0 for a null handle.
 *
 * # Safety
 * `rep` must be null or a live handle.
 */
uintptr_t mvsde_convergence_row_count(const struct MvsdeConvergence *rep);

/**
 * Fitted slope of scheme `scheme`; NaN when too few rows were usable.
 *
 * # Safety
 * `rep` must be null or a live handle; `slope` must be null or valid for a write.
 */
enum MvsdeStatus mvsde_convergence_slope(const struct MvsdeConvergence *rep,
                                         uintptr_t scheme,
                                         double *slope);

/**
 * Row `row` (descending `h`) of scheme `scheme`. `rmse` is NaN for a diverged run.
 *
 * # Safety
 * `rep` must be null or a live handle; `h` and `rmse` must be null or valid for writes.
 */
enum MvsdeStatus mvsde_convergence_row(const struct MvsdeConvergence *rep,
                                       uintptr_t scheme,
                                       uintptr_t row,
                                       double *h,
                                       double *rmse);

/**
 * Copies the scheme label into `buf` (NUL-terminated, truncated to `len`).
 * Returns the full label length excluding the NUL, or 0 for bad arguments.
 *
 * # Safety
 * `rep` must be null or a live handle; `buf` must be null or valid for `len` bytes.
 */
uintptr_t mvsde_convergence_scheme_label(const struct MvsdeConvergence *rep,
                                         uintptr_t scheme,
                                         char *buf,
                                         uintptr_t len);

/**
 * # Safety
 * `rep` must be null or a handle that is not used afterwards.
 */
void mvsde_convergence_free(struct MvsdeConvergence *rep);

/**
 * Simulates the configured model with one scheme (a config scheme name such
 * as `"me"` or `"te1"`) at step `h` up to the configured horizon.
 *
 * # Safety
 * `cfg` must be null or a live handle; `scheme` null or NUL-terminated; `out`
 * null or valid for a pointer write.
 */
enum MvsdeStatus mvsde_simulate(const struct MvsdeConfig *cfg,
                                const char *scheme,
                                double h,
                                struct MvsdeEnsemble **out);

/**
 * Particle count; 0 for a null handle.
 *
 * # Safety
 * `ens` must be null or a live handle.
 */
uintptr_t mvsde_ensemble_len(const struct MvsdeEnsemble *ens);

/**
 * State dimension; 0 for a null handle.
 *
 * # Safety
 * `ens` must be null or a live handle.
 */
uintptr_t mvsde_ensemble_dim(const struct MvsdeEnsemble *ens);

/**
 * 1 if the run stopped at a non-finite state, 0 otherwise.
 *
 * # Safety
 * `ens` must be null or a live handle.
 */
int32_t mvsde_ensemble_is_diverged(const struct MvsdeEnsemble *ens);

/**
 * Copies the `len · dim` row-major states into `buf`, which holds `cap` values.
 *
 * # Safety
 * `ens` must be null or a live handle; `buf` must be null or valid for `cap` writes.
 */
enum MvsdeStatus mvsde_ensemble_copy(const struct MvsdeEnsemble *ens, double *buf, uintptr_t cap);

/**
 * # Safety
 * `ens` must be null or a handle that is not used afterwards.
 */
void mvsde_ensemble_free(struct MvsdeEnsemble *ens);

/**
 * Moment-bound constant `max{6ρ, ((2ρ+1) r2 − 1) / r1}`.
 *
 * # Safety
 * `out` must be null or valid for a write.
 */
enum MvsdeStatus mvsde_compute_g(double rho, double r1, double r2, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MVSDE_H */
