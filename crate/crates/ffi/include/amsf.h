#ifndef AMSF_H
#define AMSF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum AmsfStatus {
  AMSF_STATUS_OK = 0,
  AMSF_STATUS_NULL_POINTER = 1,
  AMSF_STATUS_INVALID_ARGUMENT = 2,
  AMSF_STATUS_DIMENSION = 3,
  AMSF_STATUS_IO = 4,
  AMSF_STATUS_CHECKPOINT = 5,
  AMSF_STATUS_BUFFER_TOO_SMALL = 6,
  AMSF_STATUS_PANIC = 7,
} AmsfStatus;

// Opaque model handle.
typedef struct AmsfModel AmsfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *amsf_version(void);

// Length in bytes of the last error message, excluding the terminator;
// 0 when the last call succeeded.
size_t amsf_last_error_length(void);

// Copies the last error message into `buf` (always NUL-terminated when
// `buf_len > 0`). Returns `BUFFER_TOO_SMALL` when the message was truncated.
//
// # Safety
// `buf` must point to `buf_len` writable bytes.
enum AmsfStatus amsf_last_error_message(char *buf, size_t buf_len);

// Multi-level orthonormal Haar analysis of a row-major `rows x cols` image.
//
// `output` (also `rows x cols`) receives the packed pyramid: at each level
// the current low-pass region is split into quadrants, LL top-left, HL
// (column differences) top-right, LH (row differences) bottom-left and HH
// bottom-right. Both sides must be divisible by `2^levels`, `levels` in 1..=4.
//
// # Safety
// `input` and `output` must each point to `rows * cols` doubles.
enum AmsfStatus amsf_haar_dwt(const double *input,
                              size_t rows,
                              size_t cols,
                              size_t levels,
                              double *output);

// Exact inverse of [`amsf_haar_dwt`] for the same packed layout.
//
// # Safety
// `input` and `output` must each point to `rows * cols` doubles.
enum AmsfStatus amsf_haar_idwt(const double *input,
                               size_t rows,
                               size_t cols,
                               size_t levels,
                               double *output);

// Creates a freshly initialized model. `config_toml` holds model settings
// (the keys of a run config's `[model]` section) and may be null for
// defaults.
//
// # Safety
// `config_toml` must be null or a NUL-terminated string; `out` must be a
// valid pointer. The handle must be released with [`amsf_model_free`].
enum AmsfStatus amsf_model_new(const char *config_toml, uint64_t seed, struct AmsfModel **out);

// Loads a model from a training checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AmsfStatus amsf_model_load(const char *path, struct AmsfModel **out);

// Releases a model handle; null is ignored.
//
// # Safety
// `model` must be null or a handle from this library not yet freed.
void amsf_model_free(struct AmsfModel *model);

// Side length of the square images the model expects; 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t amsf_model_image_size(const struct AmsfModel *model);

// Length of the embedding vectors produced by [`amsf_model_embed`]; 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t amsf_model_embedding_dim(const struct AmsfModel *model);

// Pooled eval-mode feature vector of one row-major `rows x cols` image in
// `[0, 1]`. The image must match [`amsf_model_image_size`].
//
// # Safety
// `image` must point to `rows * cols` doubles and `out` to `out_len`.
enum AmsfStatus amsf_model_embed(const struct AmsfModel *model,
                                 const double *image,
                                 size_t rows,
                                 size_t cols,
                                 double *out,
                                 size_t out_len);

// Classifies `n_query` query images against an `n_way`-class support set
// of `k_shot` images per class. Images are row-major squares of side
// [`amsf_model_image_size`], packed contiguously; `support` is ordered by
// class, then shot. Writes `n_query * n_way` row-major class probabilities
// and, when `predictions` is non-null, `n_query` predicted class indices.
//
// # Safety
// Every pointer must cover the number of elements described above.
enum AmsfStatus amsf_model_classify(const struct AmsfModel *model,
                                    const double *support,
                                    size_t n_way,
                                    size_t k_shot,
                                    const double *queries,
                                    size_t n_query,
                                    double *probabilities,
                                    size_t *predictions);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AMSF_H */
