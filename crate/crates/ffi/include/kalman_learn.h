/* C interface to the kalman-learn filtering library.
 *
 * Conventions:
 *   - Fallible functions return an int32_t status code; KL_OK (0) is success.
 *     On failure, kl_last_error() returns a message for the calling thread,
 *     valid until that thread's next failing call.
 *   - Matrices are row-major double buffers; all storage is caller-owned and
 *     never retained past the call.
 *   - kl_filter handles are opaque, owned by the library, released with
 *     kl_filter_free(), and not thread-safe (confine or lock externally).
 */

#ifndef KALMAN_LEARN_H
#define KALMAN_LEARN_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
    KL_OK = 0,
    KL_ERR_NULL_POINTER = 1, /* required pointer argument was NULL */
    KL_ERR_INVALID = 2,      /* bad dimensions, non-PD noise, bad config */
    KL_ERR_NUMERIC = 3,      /* singular/unobservable system, non-finite values */
    KL_ERR_PANIC = 4         /* internal panic contained at the boundary */
};

/* Opaque linear-Gaussian Kalman filter state. */
typedef struct KlFilter kl_filter;

/* Library version string (static storage; do not free). */
const char *kl_version(void);

/* Message for the most recent failure on the calling thread. */
const char *kl_last_error(void);

/* Create a filter for x' = A x + w, y = C x + v with prior
 * N(mean0, sigma0_sq * I).
 *   a: d x d,  c: m x d,  q: d x d,  r: m x m,  mean0: d entries.
 * On success *out owns the handle. */
int32_t kl_filter_new(size_t state_dim, size_t obs_dim,
                      const double *a, const double *c,
                      const double *q, const double *r,
                      const double *mean0, double sigma0_sq,
                      kl_filter **out);

/* Release a handle; NULL is a no-op. */
void kl_filter_free(kl_filter *handle);

/* Predict-then-update with observation y (m entries). If innovation_norm is
 * non-NULL it receives ||y - C x_pred||. On failure the belief is unchanged. */
int32_t kl_filter_step(kl_filter *handle, const double *y,
                       double *innovation_norm);

/* Copy the posterior mean into out (state_dim doubles). */
int32_t kl_filter_mean(const kl_filter *handle, double *out);

/* Copy the posterior covariance into out (state_dim^2 doubles, row-major). */
int32_t kl_filter_covariance(const kl_filter *handle, double *out);

/* Number of measurement updates applied so far. */
int32_t kl_filter_step_count(const kl_filter *handle, uint64_t *out);

/* Steady-state Riccati solution for (A, C, Q, R). p_pred (d x d) and
 * gain (d x m) may each be NULL to skip. Fails with KL_ERR_NUMERIC when the
 * (A, C) pair is unobservable. */
int32_t kl_dare_solve(size_t state_dim, size_t obs_dim,
                      const double *a, const double *c,
                      const double *q, const double *r,
                      double tol, size_t max_iter,
                      double *p_pred, double *gain);

/* Spectral radius of a d x d row-major matrix. */
int32_t kl_spectral_radius(size_t dim, const double *a, double *out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* KALMAN_LEARN_H */
