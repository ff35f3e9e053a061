#ifndef HPST_H
#define HPST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes shared by every call.
 */
typedef enum HpstStatus {
  HPST_STATUS_OK = 0,
  HPST_STATUS_NULL_ARGUMENT = 1,
  HPST_STATUS_INVALID_ARGUMENT = 2,
  HPST_STATUS_IO = 3,
  HPST_STATUS_CORRUPT_CHECKPOINT = 4,
  HPST_STATUS_INCOMPATIBLE = 5,
  HPST_STATUS_COMPUTE = 6,
  HPST_STATUS_PANIC = 7,
} HpstStatus;

/*
 Opaque trained model.
 */
typedef struct HpstModel HpstModel;

/*
 One hit: transverse cell, plane index and deposited value.
 */
typedef struct HpstHit {
  double transverse;
  double plane;
  double value;
} HpstHit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *hpst_version(void);

/*
 Copies the calling thread's last error message into `buf` (truncated,
 always NUL-terminated) and returns the full message length in bytes.

 # Safety
 `buf` must be null or valid for `len` bytes.
 */
size_t hpst_last_error_message(char *buf, size_t len);

/*
 Loads a checkpoint file into a new handle stored in `*out`.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HpstStatus hpst_model_load(const char *path, struct HpstModel **out);

/*
 Releases a handle; null is ignored.

 # Safety
 `model` must come from `hpst_model_load` and not be used afterwards.
 */
void hpst_model_free(struct HpstModel *model);

/*
 Reports the class count, instance-slot count and parameter count.

 # Safety
 `model` must be a live handle; output pointers may be null.
 */
enum HpstStatus hpst_model_info(const struct HpstModel *model,
                                size_t *n_classes,
                                size_t *n_slots,
                                size_t *n_params);

/*
 Runs inference on one event given as two hit arrays.

 Rows of the outputs follow view 0 then view 1. `class_probs` receives
 `(n0 + n1) * n_classes` values, `slots` receives `n0 + n1` slot indices.

 # Safety
 Hit arrays must hold `n0` / `n1` entries (may be null when empty);
 output buffers must be large enough as described.
 */
enum HpstStatus hpst_model_predict(const struct HpstModel *model,
                                   const struct HpstHit *hits0,
                                   size_t n0,
                                   const struct HpstHit *hits1,
                                   size_t n1,
                                   double *class_probs,
                                   uint32_t *slots);

/*
 Writes a synthetic dataset with the default generator settings, the
 given seed and cross-view ambiguity.

 # Safety
 `out_path` must be a NUL-terminated string.
 */
enum HpstStatus hpst_generate_dataset(uint64_t n_events,
                                      uint64_t seed,
                                      double cross_view_ambiguity,
                                      const char *out_path);

/*
 Minimum-cost assignment on a row-major `n x n` cost matrix. Writes the
 column of each row to `col_for_row` and the cost to `total_cost`.

 # Safety
 `cost` must hold `n * n` values, `col_for_row` `n` entries.
 */
enum HpstStatus hpst_linear_sum_assignment(const double *cost,
                                           size_t n,
                                           size_t *col_for_row,
                                           double *total_cost);

/*
 Non-zero when `status` is `Ok`; convenience for callers without enums.
 */
int hpst_status_ok(enum HpstStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HPST_H */
