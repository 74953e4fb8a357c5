#ifndef LSAN_H
#define LSAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum LsanStatus {
  LSAN_STATUS_OK = 0,
  LSAN_STATUS_NULL_POINTER = 1,
  LSAN_STATUS_INVALID_ARGUMENT = 2,
  LSAN_STATUS_IO = 3,
  LSAN_STATUS_FORMAT = 4,
  LSAN_STATUS_CONTRACT = 5,
  LSAN_STATUS_INDEX_OUT_OF_RANGE = 6,
  LSAN_STATUS_NUMERIC = 7,
  LSAN_STATUS_PANIC = 8,
} LsanStatus;

/**
 * A loaded model with its vocabularies.
 */
typedef struct LsanModel LsanModel;

/**
 * Parameter counts by group.
 */
typedef struct LsanParamCounts {
  size_t embedding;
  size_t context;
  size_t fusion;
  size_t position;
  size_t encoder;
  size_t ffn;
  size_t output;
  size_t total;
} LsanParamCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *lsan_last_error(void);

/**
 * Loads the checkpoint directory `dir` (UTF-8 path) into `*out`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LsanStatus lsan_model_load(const char *dir, struct LsanModel **out);

/**
 * Releases a handle from [`lsan_model_load`]; null is ignored.
 *
 * # Safety
 * `model` must come from [`lsan_model_load`] and not be used afterwards.
 */
void lsan_model_free(struct LsanModel *model);

/**
 * Number of items the model ranks.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum LsanStatus lsan_model_num_items(const struct LsanModel *model, size_t *out);

/**
 * Rows of the context table; valid context indices are below this.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum LsanStatus lsan_model_num_contexts(const struct LsanModel *model, size_t *out);

/**
 * Parameter counts of the loaded model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum LsanStatus lsan_model_count_params(const struct LsanModel *model, struct LsanParamCounts *out);

/**
 * Next-item probabilities for one sequence of item and context indices.
 * `out` must hold `out_len >= num_items` values.
 *
 * # Safety
 * `items` and `contexts` must point to `len` values, `out` to `out_len`.
 */
enum LsanStatus lsan_model_scores(const struct LsanModel *model,
                                  const size_t *items,
                                  const size_t *contexts,
                                  size_t len,
                                  float *out,
                                  size_t out_len);

/**
 * The `k` most likely next items, best first; ties go to the lower index.
 * `out` must hold `k` values.
 *
 * # Safety
 * `items` and `contexts` must point to `len` values, `out` to `k`.
 */
enum LsanStatus lsan_model_predict_topk(const struct LsanModel *model,
                                        const size_t *items,
                                        const size_t *contexts,
                                        size_t len,
                                        size_t k,
                                        size_t *out);

/**
 * Looks up the raw id of item `index`, copying at most `cap` bytes including
 * the NUL terminator into `buf`. `*needed` receives the full size required.
 *
 * # Safety
 * `buf` must hold `cap` bytes (or be null with `cap == 0`); `needed` may be null.
 */
enum LsanStatus lsan_model_item_id(const struct LsanModel *model,
                                   size_t index,
                                   char *buf,
                                   size_t cap,
                                   size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LSAN_H */
