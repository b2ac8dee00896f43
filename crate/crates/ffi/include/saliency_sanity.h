#ifndef SALIENCY_SANITY_H
#define SALIENCY_SANITY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad argument value: unknown method or metric, wrong input length,
   * class out of range, mismatched map shapes.
   */
  SS_STATUS_INVALID_ARGUMENT = 3,
  SS_STATUS_IO = 4,
  /**
   * Malformed checkpoint or data file.
   */
  SS_STATUS_DATA = 5,
  /**
   * The method is not defined for this architecture (GradCAM without a
   * convolution).
   */
  SS_STATUS_METHOD_UNDEFINED = 6,
  /**
   * Non-finite values or divergence inside the engine.
   */
  SS_STATUS_NUMERIC = 7,
  SS_STATUS_BUFFER_TOO_SMALL = 8,
  SS_STATUS_PANIC = 9,
} SsStatus;

/**
 * A saliency map with its method and target class.
 */
typedef struct SsMap SsMap;

/**
 * A trained or randomized network.
 */
typedef struct SsModel SsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ss_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated and
 * always NUL-terminated when `cap > 0`). Returns the full message length
 * in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t ss_last_error(char *buf, size_t cap);

/**
 * Loads a `model.json` checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SsStatus ss_model_load(const char *path, struct SsModel **out);

/**
 * Parses a checkpoint from its JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum SsStatus ss_model_from_json(const char *json, struct SsModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library, freed at most once.
 */
void ss_model_free(struct SsModel *model);

/**
 * Number of `double`s in one input. Zero for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ss_model_input_len(const struct SsModel *model);

/**
 * Zero for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ss_model_num_classes(const struct SsModel *model);

/**
 * Writes the argmax class for one input.
 *
 * # Safety
 * `input` must hold `len` doubles; `class_out` must be writable.
 */
enum SsStatus ss_model_predict(const struct SsModel *model,
                               const double *input,
                               size_t len,
                               size_t *class_out);

/**
 * Copy of `model` with the comma-separated layers (e.g. `"fc2,fc1"`)
 * re-initialized from `seed`.
 *
 * # Safety
 * `layers` must be a NUL-terminated string; `out` must be writable.
 */
enum SsStatus ss_model_randomize(const struct SsModel *model,
                                 const char *layers,
                                 uint64_t seed,
                                 struct SsModel **out);

/**
 * Computes an unnormalized saliency map. `method` uses the CLI names
 * (`gradient`, `smoothgrad`, `vargrad`, `gradient_input`,
 * `integrated_gradients`, `guided_backprop`, `gradcam`, `guided_gradcam`,
 * or `smoothgrad:<base>` / `vargrad:<base>`). A negative `class` explains
 * the predicted class. `seed` drives SmoothGrad and VarGrad noise; other
 * parameters take their defaults.
 *
 * # Safety
 * `input` must hold `len` doubles; `method` must be a NUL-terminated
 * string; `out` must be writable.
 */
enum SsStatus ss_explain(const struct SsModel *model,
                         const double *input,
                         size_t len,
                         const char *method,
                         int64_t class_,
                         uint64_t seed,
                         struct SsMap **out);

/**
 * # Safety
 * `map` must be null or a handle from this library, freed at most once.
 */
void ss_map_free(struct SsMap *map);

/**
 * Number of values in the map. Zero for a null handle.
 *
 * # Safety
 * `map` must be null or a live handle.
 */
size_t ss_map_len(const struct SsMap *map);

/**
 * The class the map explains.
 *
 * # Safety
 * `map` must be a live handle; `class_out` must be writable.
 */
enum SsStatus ss_map_class(const struct SsMap *map, size_t *class_out);

/**
 * Copies the map's values (row-major) into `buf`.
 *
 * # Safety
 * `buf` must be valid for `cap` doubles.
 */
enum SsStatus ss_map_values(const struct SsMap *map, double *buf, size_t cap);

/**
 * Similarity of two maps after normalization. `metric` is one of
 * `spearman_abs`, `spearman_noabs`, `ssim`, `hog_pearson`. When either
 * map is constant the value is 0 and `degenerate_out` is set.
 *
 * # Safety
 * `metric` must be a NUL-terminated string; outputs must be writable.
 */
enum SsStatus ss_compare(const struct SsMap *a,
                         const struct SsMap *b,
                         const char *metric,
                         double *value_out,
                         bool *degenerate_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SALIENCY_SANITY_H */
