#ifndef GRLE_H
#define GRLE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GrleStatus {
  GRLE_STATUS_OK = 0,
  GRLE_STATUS_NULL_POINTER = 1,
  GRLE_STATUS_INVALID_UTF8 = 2,
  GRLE_STATUS_IO = 3,
  GRLE_STATUS_CHECKPOINT = 4,
  GRLE_STATUS_INVALID_ARGUMENT = 5,
  GRLE_STATUS_BUFFER_TOO_SMALL = 6,
  GRLE_STATUS_INTERNAL = 7,
} GrleStatus;

/**
 * A loaded model. Only ever handled through pointers.
 */
typedef struct GrleModel GrleModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads the checkpoint directory `path` into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GrleStatus grle_model_load(const char *path, struct GrleModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`grle_model_load`] and not be used afterwards.
 */
void grle_model_free(struct GrleModel *model);

/**
 * Embedding width of `model`, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t grle_model_dim(const struct GrleModel *model);

/**
 * Embeds one text into `out`, which holds `out_len` floats. The first
 * [`grle_model_dim`] entries are written.
 *
 * # Safety
 * `model` must be a live handle, `text` NUL-terminated and `out` valid for
 * `out_len` writes.
 */
enum GrleStatus grle_model_encode(const struct GrleModel *model,
                                  const char *text,
                                  float *out,
                                  size_t out_len);

/**
 * Cosine similarity of two `len`-float vectors, written to `*out`.
 *
 * # Safety
 * `a` and `b` must be valid for `len` reads and `out` for one write.
 */
enum GrleStatus grle_cosine(const float *a, const float *b, size_t len, float *out);

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *grle_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRLE_H */
