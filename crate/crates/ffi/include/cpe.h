#ifndef CPE_H
#define CPE_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CPE_RULE_SP 0

#define CPE_RULE_PP 1

#define CPE_RULE_MLE 2

#define CPE_RULE_MLE_BATCH 3

#define CPE_LABEL_RIGHT -1

#define CPE_LABEL_INDIFFERENT 0

#define CPE_LABEL_LEFT 1

typedef enum CpeStatus {
  CPE_STATUS_OK = 0,
  CPE_STATUS_NULL_POINTER = 1,
  CPE_STATUS_INVALID_ARGUMENT = 2,
  CPE_STATUS_STALE_QUERY = 3,
  CPE_STATUS_FINISHED = 4,
  CPE_STATUS_DEGENERATE = 5,
  CPE_STATUS_IO = 6,
  CPE_STATUS_INTERNAL = 7,
  CPE_STATUS_PANIC = 8,
} CpeStatus;

/**
 * Opaque session handle.
 */
typedef struct CpeSession CpeSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a session from a JSON request `{problem, problem_params,
 * loop_config, seed}`.
 *
 * # Safety
 * `request_json` must be a NUL-terminated string; `out` must be writable.
 */
enum CpeStatus cpe_session_create(const char *request_json, struct CpeSession **out);

/**
 * # Safety
 * `session` must come from [`cpe_session_create`] and not be used afterwards.
 */
void cpe_session_free(struct CpeSession *session);

/**
 * Writes the pending query as JSON, selecting one if none is pending.
 *
 * # Safety
 * `session` must be a live handle; `out_json` must be writable.
 */
enum CpeStatus cpe_session_next_query(struct CpeSession *session, char **out_json);

/**
 * Answers query `query_id` with `label` (`CPE_LABEL_*`). `out_iteration`
 * may be null.
 *
 * # Safety
 * `session` must be a live handle; `out_iteration` null or writable.
 */
enum CpeStatus cpe_session_answer(struct CpeSession *session,
                                  uint64_t query_id,
                                  int32_t label,
                                  uint64_t *out_iteration);

/**
 * Writes `{iteration, steps, weights_mean, weights_std, history_counts,
 * finished}`.
 *
 * # Safety
 * `session` must be a live handle; `out_json` must be writable.
 */
enum CpeStatus cpe_session_state_json(const struct CpeSession *session, char **out_json);

/**
 * Synthesizes for instance `instance_id` under the ensemble-mean weights; a
 * negative id selects the first test instance.
 *
 * # Safety
 * `session` must be a live handle; `out_json` must be writable.
 */
enum CpeStatus cpe_session_synthesize(const struct CpeSession *session,
                                      int64_t instance_id,
                                      char **out_json);

/**
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void cpe_string_free(char *s);

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *cpe_last_error_message(void);

/**
 * Update factor of `rule` at `margin = u(y+) - u(y-)`; NaN for an unknown
 * rule.
 */
double cpe_update_factor(uint32_t rule, double margin);

/**
 * Negative log-likelihood of one preference and, when `out_grad` is not
 * null, its gradient (`n` values).
 *
 * # Safety
 * `w` and `delta` must point to `n` readable doubles, `out_loss` to one
 * writable double, `out_grad` to `n` writable doubles or be null.
 */
enum CpeStatus cpe_nll(const double *w,
                       const double *delta,
                       size_t n,
                       double *out_loss,
                       double *out_grad);

/**
 * Library version, statically allocated.
 */
const char *cpe_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPE_H */
