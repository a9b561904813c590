#ifndef HYPERLAB_H
#define HYPERLAB_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HyperlabArtifact {
  HYPERLAB_ARTIFACT_CSV = 0,
  HYPERLAB_ARTIFACT_JSON = 1,
  HYPERLAB_ARTIFACT_SUMMARY = 2,
} HyperlabArtifact;

typedef enum HyperlabStatus {
  HYPERLAB_STATUS_OK = 0,
  HYPERLAB_STATUS_NULL_POINTER = 1,
  /**
   * Rejected input or configuration.
   */
  HYPERLAB_STATUS_VALIDATION = 2,
  HYPERLAB_STATUS_NUMERICAL = 3,
  HYPERLAB_STATUS_BUFFER_TOO_SMALL = 4,
  HYPERLAB_STATUS_PANIC = 5,
} HyperlabStatus;

typedef struct HyperlabConfig HyperlabConfig;

typedef struct HyperlabResult HyperlabResult;

/**
 * Solution of the Dyson equation at one `(z, w)`.
 */
typedef struct HyperlabMdePoint {
  double m_re;
  double m_im;
  double u_re;
  double u_im;
  double dm_dw_re;
  double dm_dw_im;
  double residual;
} HyperlabMdePoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread.
 *
 * # Safety
 * `buf` must point to `len` writable bytes or be null; `needed` may be null.
 */
enum HyperlabStatus hyperlab_last_error(char *buf, size_t len, size_t *needed);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum HyperlabStatus hyperlab_mde_solve(double z_re,
                                       double z_im,
                                       double w_re,
                                       double w_im,
                                       struct HyperlabMdePoint *out);

/**
 * Eigenvalues `beta_plus, beta_minus` written as `[re+, im+, re-, im-]`.
 *
 * # Safety
 * `z` and `w` point to 4 doubles `[re1, im1, re2, im2]`; `out` to 4 writable doubles.
 */
enum HyperlabStatus hyperlab_beta_pm(const double *z, const double *w, double *out);

/**
 * Ascending singular values of `X - z` for sample `index` of the Gaussian ensemble.
 *
 * # Safety
 * `out` must point to `n` writable doubles.
 */
enum HyperlabStatus hyperlab_singular_values(size_t n,
                                             bool real_class,
                                             uint64_t seed,
                                             uint64_t index,
                                             double z_re,
                                             double z_im,
                                             double *out);

/**
 * Parses and validates a TOML run configuration.
 *
 * # Safety
 * `text` is a NUL-terminated UTF-8 string; `out` receives a handle owned by the caller.
 */
enum HyperlabStatus hyperlab_config_parse(const char *text, struct HyperlabConfig **out);

/**
 * # Safety
 * `config` is null or a handle from [`hyperlab_config_parse`] not yet freed.
 */
void hyperlab_config_free(struct HyperlabConfig *config);

/**
 * Hex digest of the numerically relevant part of the configuration.
 *
 * # Safety
 * See [`hyperlab_last_error`] for the buffer contract.
 */
enum HyperlabStatus hyperlab_config_hash(const struct HyperlabConfig *config,
                                         char *buf,
                                         size_t len,
                                         size_t *needed);

/**
 * Runs the configured experiment with `workers` threads (0 keeps the configured count).
 *
 * # Safety
 * `config` is a live handle; `out` receives a result handle owned by the caller.
 */
enum HyperlabStatus hyperlab_run(const struct HyperlabConfig *config,
                                 size_t workers,
                                 struct HyperlabResult **out);

/**
 * # Safety
 * `result` is null or a handle from [`hyperlab_run`] not yet freed.
 */
void hyperlab_result_free(struct HyperlabResult *result);

/**
 * Copies one artifact of a result into `buf`.
 *
 * # Safety
 * `result` is a live handle; see [`hyperlab_last_error`] for the buffer contract.
 */
enum HyperlabStatus hyperlab_result_text(const struct HyperlabResult *result,
                                         enum HyperlabArtifact which,
                                         char *buf,
                                         size_t len,
                                         size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYPERLAB_H */
