#ifndef FACTORMIX_H
#define FACTORMIX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 1 to 5 match the CLI exit codes.
 */
typedef enum FmStatus {
  FM_STATUS_OK = 0,
  FM_STATUS_INTERNAL = 1,
  FM_STATUS_CONFIG = 2,
  FM_STATUS_DATA = 3,
  FM_STATUS_NUMERIC = 4,
  FM_STATUS_IO = 5,
  FM_STATUS_NULL_ARGUMENT = 6,
  FM_STATUS_INVALID_ARGUMENT = 7,
  FM_STATUS_PANIC = 8,
} FmStatus;

/**
 * A loaded or generated dataset.
 */
typedef struct FmDataset FmDataset;

/**
 * The five networks of a checkpoint.
 */
typedef struct FmModel FmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fm_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next factormix call on this thread.
 */
const char *fm_last_error(void);

/**
 * Generates the synthetic benchmark with `n_classes` class counts.
 *
 * # Safety
 * `counts` must point to `n_classes` readable values and `out` must be a
 * valid pointer to write the handle to.
 */
enum FmStatus fm_dataset_generate(const size_t *counts,
                                  size_t n_classes,
                                  size_t image_size,
                                  uint64_t seed,
                                  struct FmDataset **out);

/**
 * Loads an FFDS dataset file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FmStatus fm_dataset_load(const char *path, struct FmDataset **out);

/**
 * Writes `ds` as an FFDS file.
 *
 * # Safety
 * `ds` must be a live handle and `path` a NUL-terminated string.
 */
enum FmStatus fm_dataset_save(const struct FmDataset *ds, const char *path);

/**
 * Number of samples, 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
size_t fm_dataset_len(const struct FmDataset *ds);

/**
 * Number of classes, 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
size_t fm_dataset_class_count(const struct FmDataset *ds);

/**
 * Image side length, 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
size_t fm_dataset_image_size(const struct FmDataset *ds);

/**
 * Copies sample `index` into `pixels` (row-major, side²) and its label.
 *
 * # Safety
 * `ds` must be a live handle, `pixels` must have room for `pixels_len`
 * floats and `label` must be a valid pointer.
 */
enum FmStatus fm_dataset_sample(const struct FmDataset *ds,
                                size_t index,
                                float *pixels,
                                size_t pixels_len,
                                uint32_t *label);

/**
 * Releases a dataset handle. NULL is ignored.
 *
 * # Safety
 * `ds` must be NULL or a handle not yet freed.
 */
void fm_dataset_free(struct FmDataset *ds);

/**
 * Loads an FFCK checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FmStatus fm_model_load(const char *path, struct FmModel **out);

/**
 * Writes the model back to an FFCK checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum FmStatus fm_model_save(const struct FmModel *model, const char *path);

/**
 * Number of classes, 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t fm_model_class_count(const struct FmModel *model);

/**
 * Expected image side length, 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t fm_model_image_size(const struct FmModel *model);

/**
 * Class probabilities for `n_images` images of side² floats each, written
 * row-major into `probs` (`n_images × class_count`).
 *
 * # Safety
 * `model` must be a live handle, `pixels` must hold `n_images × side²`
 * floats and `probs` must have room for `probs_len` floats.
 */
enum FmStatus fm_model_predict(struct FmModel *model,
                               const float *pixels,
                               size_t n_images,
                               float *probs,
                               size_t probs_len);

/**
 * Reconstructs one image through both encoders and the decoder.
 *
 * # Safety
 * `model` must be a live handle, `pixels` must hold side² floats and `out`
 * must have room for `out_len` floats.
 */
enum FmStatus fm_model_reconstruct(const struct FmModel *model,
                                   const float *pixels,
                                   float *out,
                                   size_t out_len);

/**
 * Decodes the unspecified code of `x` with the specified code of `y`.
 *
 * # Safety
 * `model` must be a live handle, `x` and `y` must each hold side² floats and
 * `out` must have room for `out_len` floats.
 */
enum FmStatus fm_model_swap(const struct FmModel *model,
                            const float *x,
                            const float *y,
                            float *out,
                            size_t out_len);

/**
 * Releases a model handle. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void fm_model_free(struct FmModel *model);

/**
 * Runs a full experiment from a TOML config and writes checkpoints, logs
 * and the report into `out_dir`. Mean test accuracies are written to the
 * optional out pointers; `proposed_mean` gets NaN for a baseline-only run.
 *
 * # Safety
 * `config_toml` and `out_dir` must be NUL-terminated strings; the out
 * pointers must be NULL or valid.
 */
enum FmStatus fm_run_experiment(const char *config_toml,
                                const char *out_dir,
                                double *baseline_mean,
                                double *proposed_mean);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FACTORMIX_H */
