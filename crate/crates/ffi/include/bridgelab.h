#ifndef BRIDGELAB_H
#define BRIDGELAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes returned by every fallible function.
 */
typedef enum BlStatus {
  BL_STATUS_OK = 0,
  BL_STATUS_NULL_POINTER = 1,
  BL_STATUS_INVALID_ARGUMENT = 2,
  BL_STATUS_CONFIG = 3,
  BL_STATUS_FORMAT = 4,
  BL_STATUS_IO = 5,
  BL_STATUS_INSUFFICIENT_DATA = 6,
  BL_STATUS_NUMERICAL = 7,
  BL_STATUS_VALIDATION_FAILED = 8,
  BL_STATUS_PANIC = 9,
} BlStatus;

/*
 Opaque dataset handle.
 */
typedef struct BlDataset BlDataset;

/*
 Opaque trained-model handle.
 */
typedef struct BlModel BlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *bl_version(void);

/*
 Message of the last failed call on this thread, or null if the last
 call succeeded. The pointer stays valid until the next call on the same
 thread.
 */
const char *bl_last_error_message(void);

/*
 Generates a synthetic dataset from generator configuration text
 (`classes`, `per_class`, `ambiguity`, `seed`, ...). A null `config`
 selects all defaults.

 # Safety
 `config` must be null or a NUL-terminated string; `out` must be a valid
 pointer to write the new handle to.
 */
enum BlStatus bl_dataset_generate(const char *config, struct BlDataset **out);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum BlStatus bl_dataset_load(const char *path, struct BlDataset **out);

/*
 # Safety
 `dataset` must be a live handle; `path` a NUL-terminated string.
 */
enum BlStatus bl_dataset_save(const struct BlDataset *dataset, const char *path);

/*
 Number of instances and classes in a dataset.

 # Safety
 `dataset` must be a live handle; the out pointers may be null.
 */
enum BlStatus bl_dataset_size(const struct BlDataset *dataset,
                              size_t *out_instances,
                              size_t *out_classes);

/*
 # Safety
 `dataset` must be null or a handle not yet freed.
 */
void bl_dataset_free(struct BlDataset *dataset);

/*
 Trains a model on `dataset` using run configuration text (`variant`,
 `steps`, `lr`, `way`, `shot`, `query`, `seed`, backbone and bridge
 keys, ...). A null `config` selects all defaults.

 # Safety
 `dataset` must be a live handle, `config` null or a NUL-terminated
 string, and `out` a valid pointer.
 */
enum BlStatus bl_model_train(const struct BlDataset *dataset,
                             const char *config,
                             struct BlModel **out);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum BlStatus bl_model_load(const char *path, struct BlModel **out);

/*
 # Safety
 `model` must be a live handle; `path` a NUL-terminated string.
 */
enum BlStatus bl_model_save(const struct BlModel *model, const char *path);

/*
 # Safety
 `model` must be null or a handle not yet freed.
 */
void bl_model_free(struct BlModel *model);

/*
 Mean episode accuracy and its 95% CI half-width over the evaluation
 stream selected by `config` (`eval_seed`, `eval_episodes`,
 `eval_split`, episode shape, `workers`).

 # Safety
 `model` and `dataset` must be live handles, `config` null or a
 NUL-terminated string, and both out pointers valid.
 */
enum BlStatus bl_evaluate(const struct BlModel *model,
                          const struct BlDataset *dataset,
                          const char *config,
                          double *out_mean,
                          double *out_ci95);

/*
 Runs the gradient-check suite. Writes the worst relative error across
 components and returns `ValidationFailed` if it exceeds the tolerance.

 # Safety
 `out_max_rel_error` must be null or a valid pointer.
 */
enum BlStatus bl_gradcheck(uint64_t seed, double *out_max_rel_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRIDGELAB_H */
