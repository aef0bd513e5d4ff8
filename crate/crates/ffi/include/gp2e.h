#ifndef GP2E_H
#define GP2E_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Toy task identifiers accepted by [`gp2e_env_new`].
 */
#define GP2E_TASK_TOY_FILL 1

#define GP2E_TASK_TOY_POUR 2

/**
 * Length of the robot state vector.
 */
#define GP2E_ROBOT_STATE_DIM 7

/**
 * Length of the action vector `[dx, dy, dz, grip]`.
 */
#define GP2E_ACTION_DIM 4

/**
 * Columns per point: `x, y, z, r, g, b`.
 */
#define GP2E_POINT_COLS 6

/**
 * Status code returned by every fallible call.
 */
enum Gp2eStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  GP2E_STATUS_OK = 0,
  GP2E_STATUS_NULL_POINTER = 1,
  GP2E_STATUS_INVALID_ARGUMENT = 2,
  GP2E_STATUS_IO = 3,
  GP2E_STATUS_FORMAT = 4,
  GP2E_STATUS_NUMERIC = 5,
  GP2E_STATUS_BUFFER_TOO_SMALL = 6,
  GP2E_STATUS_PANIC = 7,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum Gp2eStatus Gp2eStatus;
#else
typedef int32_t Gp2eStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * One toy environment episode.
 */
typedef struct Gp2eEnv Gp2eEnv;

/**
 * A trained policy loaded from a checkpoint.
 */
typedef struct Gp2ePolicy Gp2ePolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t gp2e_last_error_message(char *buf, size_t len);

/**
 * Loads a checkpoint file into a new policy handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
Gp2eStatus gp2e_policy_load(const char *path, struct Gp2ePolicy **out);

/**
 * # Safety
 * `policy` must be null or a handle from [`gp2e_policy_load`] not yet freed.
 */
void gp2e_policy_free(struct Gp2ePolicy *policy);

/**
 * Number of cloud points the policy expects.
 *
 * # Safety
 * `policy` must be a live handle; `out` must be writable.
 */
Gp2eStatus gp2e_policy_n_points(const struct Gp2ePolicy *policy, size_t *out);

/**
 * Runs the policy on an `n_points × 6` row-major cloud and a robot state of
 * [`GP2E_ROBOT_STATE_DIM`] values, writing [`GP2E_ACTION_DIM`] values.
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths.
 */
Gp2eStatus gp2e_policy_forward(const struct Gp2ePolicy *policy,
                               const double *points,
                               size_t n_points,
                               const double *robot_state,
                               size_t state_len,
                               double *action_out,
                               size_t action_len);

/**
 * Creates an environment for `task` and resets it with `seed`.
 *
 * # Safety
 * `out` must be writable.
 */
Gp2eStatus gp2e_env_new(uint32_t task, uint64_t seed, struct Gp2eEnv **out);

/**
 * # Safety
 * `env` must be null or a handle from [`gp2e_env_new`] not yet freed.
 */
void gp2e_env_free(struct Gp2eEnv *env);

/**
 * Starts a new episode from `seed`.
 *
 * # Safety
 * `env` must be a live handle.
 */
Gp2eStatus gp2e_env_reset(struct Gp2eEnv *env, uint64_t seed);

/**
 * Applies one action `[dx, dy, dz, grip]` over `substeps` physics substeps.
 *
 * # Safety
 * `env` must be a live handle; `action` must hold `len` values.
 */
Gp2eStatus gp2e_env_step(struct Gp2eEnv *env, const double *action, size_t len, uint32_t substeps);

/**
 * Renders an observation: `n_points × 6` values into `points_out` and
 * [`GP2E_ROBOT_STATE_DIM`] values into `robot_state_out`.
 *
 * # Safety
 * `env` must be a live handle; buffers must hold the stated lengths.
 */
Gp2eStatus gp2e_env_observe(const struct Gp2eEnv *env,
                            size_t n_points,
                            double *points_out,
                            size_t points_len,
                            double *robot_state_out,
                            size_t state_len);

/**
 * Writes 1 to `success_out` when the current state meets the task's
 * success rule, 0 otherwise. `step_out` receives the policy step count.
 *
 * # Safety
 * `env` must be a live handle; outputs must be writable or null.
 */
Gp2eStatus gp2e_env_success(const struct Gp2eEnv *env, int32_t *success_out, uint64_t *step_out);

/**
 * Scripted expert action for the current state.
 *
 * # Safety
 * `env` must be a live handle; `action_out` must hold `len` values.
 */
Gp2eStatus gp2e_env_expert_action(const struct Gp2eEnv *env, double *action_out, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GP2E_H */
