#ifndef FDDA_H
#define FDDA_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FddaStatus {
  FDDA_STATUS_OK = 0,
  FDDA_STATUS_NULL_POINTER = 1,
  FDDA_STATUS_INVALID_ARGUMENT = 2,
  FDDA_STATUS_SHAPE = 3,
  FDDA_STATUS_IO = 4,
  FDDA_STATUS_CORRUPT_ARCHIVE = 5,
  FDDA_STATUS_VERSION_MISMATCH = 6,
  FDDA_STATUS_CONFIG = 7,
  FDDA_STATUS_PANIC = 8,
} FddaStatus;

/**
 * A loaded model archive.
 */
typedef struct FddaModel FddaModel;

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library from the same thread.
 */
const char *fdda_last_error(void);

/**
 * Loads an archive from a NUL-terminated UTF-8 path.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum FddaStatus fdda_model_load(const char *path, struct FddaModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`fdda_model_load`] and not be used afterwards.
 */
void fdda_model_free(struct FddaModel *model);

/**
 * Number of batch-normalization layers, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fdda_model_bn_layer_count(const struct FddaModel *model);

/**
 * Floats per input sample, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fdda_model_input_len(const struct FddaModel *model);

/**
 * Logits per sample, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fdda_model_output_len(const struct FddaModel *model);

/**
 * Whether the archive carries activation quantizers (1) or not (0).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t fdda_model_is_quantized(const struct FddaModel *model);

/**
 * Eval-mode logits for `batch` samples laid out contiguously. Quantized
 * archives run with their quantizers active.
 *
 * # Safety
 * `images` must hold `batch * fdda_model_input_len` floats and `logits`
 * room for `logits_len` floats.
 */
enum FddaStatus fdda_model_predict(const struct FddaModel *model,
                                   const float *images,
                                   size_t batch,
                                   float *logits,
                                   size_t logits_len);

/**
 * `(upper − lower) / (2^bits − 1)`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FddaStatus fdda_compute_scale(uint32_t bits, float lower, float upper, float *out);

/**
 * Integer code of `x` under a `bits`-bit quantizer on `[lower, upper]`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FddaStatus fdda_quantize(float x, uint32_t bits, float lower, float upper, int64_t *out);

/**
 * Real value of integer code `code`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FddaStatus fdda_dequantize(int64_t code, uint32_t bits, float lower, float upper, float *out);

/**
 * Silhouette of point `index` among `n` points of dimension `dim`
 * (row-major in `points`) clustered by `labels`.
 *
 * # Safety
 * `points` must hold `n * dim` doubles and `labels` `n` entries.
 */
enum FddaStatus fdda_silhouette(const double *points,
                                size_t n,
                                size_t dim,
                                const size_t *labels,
                                size_t index,
                                double *out);

/**
 * Archive format version this library reads and writes.
 */
uint32_t fdda_format_version(void);

#endif  /* FDDA_H */
