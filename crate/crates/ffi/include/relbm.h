#ifndef RELBM_H
#define RELBM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

#define RELBM_OK 0

#define RELBM_ERR_NULL -1

#define RELBM_ERR_PANIC -2

/*
 Regime codes returned by `relbm_classify`.
 */
#define RELBM_REGIME_FINITE_HORIZON_POINT 0

#define RELBM_REGIME_FINITE_HORIZON_TANGENT 1

#define RELBM_REGIME_INF_FLAT_LINE 2

#define RELBM_REGIME_INF_SPHERE_CIRCLE 3

#define RELBM_REGIME_INF_HYP_CONE 4

/*
 Factor selector for `relbm_iwasawa_factor`.
 */
#define RELBM_FACTOR_N 0

#define RELBM_FACTOR_A 1

#define RELBM_FACTOR_K 2

/*
 NAK factors of one matrix.
 */
typedef struct RelbmIwasawa RelbmIwasawa;

/*
 Completed ensemble run.
 */
typedef struct RelbmRun RelbmRun;

/*
 One simulated reduced-dynamics path.
 */
typedef struct RelbmRwPath RelbmRwPath;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty if none.
 */
const char *relbm_last_error(void);

/*
 Library version, a static string.
 */
const char *relbm_version(void);

/*
 Asymptotic regime of a Robertson-Walker space-time.

 # Safety
 `warp` and `fiber` are NUL-terminated strings; `regime` is writable.
 */
int32_t relbm_classify(const char *warp,
                       const char *fiber,
                       uintptr_t d,
                       double sigma,
                       int32_t *regime);

/*
 Validates and runs the ensemble described by a TOML config. Nothing is
 written to disk.

 # Safety
 `config_toml` is a NUL-terminated string; `out` is writable.
 */
int32_t relbm_run(const char *config_toml, uintptr_t threads, struct RelbmRun **out);

/*
 0 all checks pass, 1 some check failed, 2 some check inconclusive; -1 for
 a null handle.

 # Safety
 `run` is null or a handle from `relbm_run`.
 */
int32_t relbm_run_exit_code(const struct RelbmRun *run);

/*
 Summary JSON; null for a null handle.

 # Safety
 `run` is null or a handle from `relbm_run`.
 */
const char *relbm_run_summary_json(const struct RelbmRun *run);

/*
 Summary CSV (`check,statistic,threshold,verdict`); null for a null handle.

 # Safety
 `run` is null or a handle from `relbm_run`.
 */
const char *relbm_run_summary_csv(const struct RelbmRun *run);

/*
 # Safety
 `run` is null or a handle from `relbm_run` not freed before.
 */
void relbm_run_free(struct RelbmRun *run);

/*
 Simulates path `path` of seed `seed` for the Robertson-Walker config in
 `config_toml`; only `[spacetime]` and `[numerics]` are used.

 # Safety
 `config_toml` is a NUL-terminated string; `out` is writable.
 */
int32_t relbm_rw_simulate(const char *config_toml,
                          uint64_t seed,
                          uint64_t path,
                          struct RelbmRwPath **out);

/*
 Number of recorded samples; 0 for a null handle.

 # Safety
 `p` is null or a handle from `relbm_rw_simulate`.
 */
uintptr_t relbm_rw_path_len(const struct RelbmRwPath *p);

/*
 Sample `i` as `(s, t, tdot, C, D, A)` written to `out[0..6]`.

 # Safety
 `p` is a handle from `relbm_rw_simulate`; `out` has room for 6 doubles.
 */
int32_t relbm_rw_path_sample(const struct RelbmRwPath *p, uintptr_t i, double *out);

/*
 # Safety
 `p` is null or a handle from `relbm_rw_simulate` not freed before.
 */
void relbm_rw_path_free(struct RelbmRwPath *p);

/*
 Factorises the `dim x dim` row-major matrix `g` of group `group`
 (`so1d+1`, `so2d` or `so1d`).

 # Safety
 `group` is a NUL-terminated string, `g` points to `dim * dim` doubles and
 `out` is writable.
 */
int32_t relbm_decompose(const char *group,
                        uintptr_t dim,
                        const double *g,
                        struct RelbmIwasawa **out);

/*
 Matrix dimension of the factors; 0 for a null handle.

 # Safety
 `h` is null or a handle from `relbm_decompose`.
 */
uintptr_t relbm_iwasawa_dim(const struct RelbmIwasawa *h);

/*
 Number of `A` parameters (1 or 2); 0 for a null handle.

 # Safety
 `h` is null or a handle from `relbm_decompose`.
 */
uintptr_t relbm_iwasawa_rank(const struct RelbmIwasawa *h);

/*
 `max |n a k - g|`; NaN for a null handle.

 # Safety
 `h` is null or a handle from `relbm_decompose`.
 */
double relbm_iwasawa_residual(const struct RelbmIwasawa *h);

/*
 Copies the `A` parameters (`rank` doubles) to `out`.

 # Safety
 `h` is a handle from `relbm_decompose`; `out` has room for `rank` doubles.
 */
int32_t relbm_iwasawa_a_params(const struct RelbmIwasawa *h, double *out);

/*
 Copies factor `which` row-major to `out` (`dim * dim` doubles).

 # Safety
 `h` is a handle from `relbm_decompose`; `out` has room for `dim * dim`
 doubles.
 */
int32_t relbm_iwasawa_factor(const struct RelbmIwasawa *h, int32_t which, double *out);

/*
 # Safety
 `h` is null or a handle from `relbm_decompose` not freed before.
 */
void relbm_iwasawa_free(struct RelbmIwasawa *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELBM_H */
