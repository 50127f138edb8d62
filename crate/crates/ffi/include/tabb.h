#ifndef TABB_H
#define TABB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum {
  TABB_STATUS_OK = 0,
  TABB_STATUS_NULL_POINTER = 1,
  TABB_STATUS_INVALID_ARGUMENT = 2,
  TABB_STATUS_CONFIG = 3,
  TABB_STATUS_IO = 4,
  TABB_STATUS_FORMAT = 5,
  TABB_STATUS_CHECKSUM = 6,
  TABB_STATUS_VERSION = 7,
  TABB_STATUS_DIMENSION = 8,
  TABB_STATUS_NON_FINITE = 9,
  TABB_STATUS_UNSUPPORTED_ENV = 10,
  TABB_STATUS_INVALID_STATE = 11,
  TABB_STATUS_EXISTS = 12,
  TABB_STATUS_BUFFER_TOO_SMALL = 13,
  TABB_STATUS_PANIC = 99,
} TabbStatus;

/**
 * Opaque trained agent.
 */
typedef struct TabbAgent TabbAgent;

/**
 * Opaque resolved configuration.
 */
typedef struct TabbConfig TabbConfig;

/**
 * Opaque offline dataset.
 */
typedef struct TabbDataset TabbDataset;

/**
 * Opaque environment (one side of a source/target pair).
 */
typedef struct TabbEnv TabbEnv;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to fit) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
uintptr_t tabb_last_error(char *buf, uintptr_t len);

/**
 * Default configuration; `desk != 0` selects the small desk profile.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
TabbStatus tabb_config_new(int32_t desk, TabbConfig **out);

/**
 * Configuration from TOML text layered over the defaults.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
TabbStatus tabb_config_from_toml(const char *toml, TabbConfig **out);

/**
 * Applies one `section.key=value` override.
 *
 * # Safety
 * `cfg` must be a live handle and `assignment` a NUL-terminated string.
 */
TabbStatus tabb_config_set(TabbConfig *cfg, const char *assignment);

/**
 * # Safety
 * `cfg` must be null or a handle from this library, not used afterwards.
 */
void tabb_config_free(TabbConfig *cfg);

/**
 * Builds the configured (source, target) environment pair.
 *
 * # Safety
 * `cfg` must be a live handle; `source` and `target` valid pointers.
 */
TabbStatus tabb_env_pair_new(const TabbConfig *cfg, TabbEnv **source, TabbEnv **target);

/**
 * State and action feature sizes.
 *
 * # Safety
 * `env` must be a live handle; outputs valid pointers.
 */
TabbStatus tabb_env_dims(const TabbEnv *env, uintptr_t *state_dim, uintptr_t *action_dim);

/**
 * One seeded step from exactly `(state, action)`.
 *
 * # Safety
 * Arrays must hold the given lengths; `next_state` must hold `state_len`.
 */
TabbStatus tabb_env_replay(const TabbEnv *env,
                           const double *state,
                           uintptr_t state_len,
                           const double *action,
                           uintptr_t action_len,
                           uint64_t seed,
                           double *reward,
                           double *next_state);

/**
 * # Safety
 * `env` must be null or a handle from this library, not used afterwards.
 */
void tabb_env_free(TabbEnv *env);

/**
 * Generates and writes the configured datasets (`force != 0` overwrites).
 *
 * # Safety
 * `cfg` must be a live handle.
 */
TabbStatus tabb_gen_data(const TabbConfig *cfg, int32_t force);

/**
 * Trains every configured seed for `run.variant`.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
TabbStatus tabb_train(const TabbConfig *cfg, int32_t force);

/**
 * Loads a dataset file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
TabbStatus tabb_dataset_load(const char *path, TabbDataset **out);

/**
 * Transition count and feature sizes.
 *
 * # Safety
 * `ds` must be a live handle; outputs valid pointers.
 */
TabbStatus tabb_dataset_info(const TabbDataset *ds,
                             uintptr_t *count,
                             uintptr_t *state_dim,
                             uintptr_t *action_dim);

/**
 * Copies transition `index` out of the dataset.
 *
 * # Safety
 * `state`/`next_state` must hold `state_dim` values, `action` `action_dim`.
 */
TabbStatus tabb_dataset_get(const TabbDataset *ds,
                            uintptr_t index,
                            double *state,
                            double *action,
                            double *reward,
                            double *next_state,
                            int32_t *terminal);

/**
 * Writes the dataset to `path`.
 *
 * # Safety
 * `ds` must be a live handle and `path` a NUL-terminated string.
 */
TabbStatus tabb_dataset_save(const TabbDataset *ds, const char *path);

/**
 * # Safety
 * `ds` must be null or a handle from this library, not used afterwards.
 */
void tabb_dataset_free(TabbDataset *ds);

/**
 * Loads an agent checkpoint; its env must match `cfg`.
 *
 * # Safety
 * `cfg` must be a live handle, `path` a NUL-terminated string, `out` valid.
 */
TabbStatus tabb_agent_load(const TabbConfig *cfg, const char *path, TabbAgent **out);

/**
 * Deterministic action for raw state features.
 *
 * # Safety
 * `features` must hold `features_len` values and `action` `action_len`.
 */
TabbStatus tabb_agent_act(const TabbAgent *agent,
                          const double *features,
                          uintptr_t features_len,
                          double *action,
                          uintptr_t action_len);

/**
 * # Safety
 * `agent` must be null or a handle from this library, not used afterwards.
 */
void tabb_agent_free(TabbAgent *agent);

/**
 * Softmax transferability weights of `n` mismatch scores.
 *
 * # Safety
 * `scores` and `weights` must each hold `n` values.
 */
TabbStatus tabb_weights(const double *scores, uintptr_t n, double temperature, double *weights);

/**
 * `100 (j - j_random) / (j_expert - j_random)`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
TabbStatus tabb_normalized_score(double j, double j_random, double j_expert, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TABB_H */
