#ifndef OODBENCH_H
#define OODBENCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result code of every call.
 */
typedef enum OodStatus {
  OOD_STATUS_OK = 0,
  OOD_STATUS_NULL_ARGUMENT = 1,
  OOD_STATUS_INVALID_UTF8 = 2,
  OOD_STATUS_IO = 3,
  /*
   Malformed container or manifest, checksum or header mismatch.
   */
  OOD_STATUS_FORMAT = 4,
  OOD_STATUS_INVALID_DATA = 5,
  OOD_STATUS_DIMENSION_MISMATCH = 6,
  OOD_STATUS_INVALID_CONFIG = 7,
  /*
   Input the method cannot handle, e.g. a zero feature vector for KNN.
   */
  OOD_STATUS_DEGENERATE = 8,
  OOD_STATUS_NOT_FOUND = 9,
  OOD_STATUS_BUFFER_TOO_SMALL = 10,
  OOD_STATUS_PANIC = 99,
} OodStatus;

/*
 A fitted OOD detector.
 */
typedef struct OodDetector OodDetector;

/*
 A set of named splits plus an optional classifier head.
 */
typedef struct OodPackSet OodPackSet;

/*
 Detection metrics for one (ID, OOD) score pair, ID as the positive class.
 */
typedef struct OodOutcome {
  double auroc;
  double aupr_in;
  double fpr_at_95;
} OodOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL after a
 successful call. The pointer stays valid until the next call on the
 same thread.
 */
const char *ood_last_error_message(void);

/*
 Library version as a static string.
 */
const char *ood_version(void);

/*
 Reads and validates the pack directory `dir`.

 # Safety
 `dir` must be a valid C string; `out` must be writable.
 */
enum OodStatus ood_pack_open(const char *dir, struct OodPackSet **out);

/*
 Creates an empty in-memory pack for `n_classes` classes.

 # Safety
 `out` must be writable.
 */
enum OodStatus ood_pack_new(size_t n_classes, struct OodPackSet **out);

/*
 Releases a pack. NULL is ignored.

 # Safety
 `pack` must come from this library and not be used afterwards.
 */
void ood_pack_free(struct OodPackSet *pack);

/*
 Adds a split from row-major buffers. `logits` (rows x n_classes) and
 `labels` (rows) may be NULL. A split with the same name is replaced.

 # Safety
 Buffers must hold at least the stated number of elements.
 */
enum OodStatus ood_pack_add_split(struct OodPackSet *pack,
                                  const char *name,
                                  const float *features,
                                  size_t rows,
                                  size_t cols,
                                  const float *logits,
                                  const uint32_t *labels);

/*
 Sets the classifier head: `weight` is n_classes x dim row-major,
 `bias` has n_classes entries.

 # Safety
 Buffers must hold at least the stated number of elements.
 */
enum OodStatus ood_pack_set_head(struct OodPackSet *pack,
                                 const float *weight,
                                 size_t n_classes,
                                 size_t dim,
                                 const float *bias);

/*
 Writes the pack to directory `dir` (created if needed).

 # Safety
 `pack` must be a live handle; `dir` a valid C string.
 */
enum OodStatus ood_pack_write(const struct OodPackSet *pack, const char *dir);

/*
 Number of splits in the pack.

 # Safety
 `pack` must be a live handle; `out` writable.
 */
enum OodStatus ood_pack_split_count(const struct OodPackSet *pack, size_t *out);

/*
 Shape (rows, feature dim) of split `name`.

 # Safety
 `pack` must be a live handle; `name` a valid C string; outs writable.
 */
enum OodStatus ood_pack_split_shape(const struct OodPackSet *pack,
                                    const char *name,
                                    size_t *rows,
                                    size_t *cols);

/*
 Writes 1 to `out` if the pack carries a classifier head, else 0.

 # Safety
 `pack` must be a live handle; `out` writable.
 */
enum OodStatus ood_pack_has_head(const struct OodPackSet *pack, int32_t *out);

/*
 Fits `method` (e.g. "MSP", "ViM", case-insensitive) on split
 `train_split`. `config_json` may be NULL or a JSON object of
 hyperparameters (`temperature`, `react_percentile`, `react_per_dimension`,
 `dice_sparsity`, `knn_k`, `vim_dim`). `calib_split` may be NULL.

 # Safety
 Pointer arguments must be valid as described; `out` writable.
 */
enum OodStatus ood_detector_fit(const struct OodPackSet *pack,
                                const char *method,
                                const char *config_json,
                                const char *train_split,
                                const char *calib_split,
                                struct OodDetector **out);

/*
 Scores every row of split `split`. `scores` must have room for
 `capacity` values; the row count is written to `written` either way,
 and `OOD_STATUS_BUFFER_TOO_SMALL` is returned when it exceeds `capacity`.

 # Safety
 Handles must be live; `scores` must hold `capacity` doubles.
 */
enum OodStatus ood_detector_score(const struct OodDetector *detector,
                                  const struct OodPackSet *pack,
                                  const char *split,
                                  double *scores,
                                  size_t capacity,
                                  size_t *written);

/*
 Saves the detector to directory `dir`.

 # Safety
 `detector` must be a live handle; `dir` a valid C string.
 */
enum OodStatus ood_detector_save(const struct OodDetector *detector, const char *dir);

/*
 Loads a detector saved by [`ood_detector_save`] or the CLI `fit` command.

 # Safety
 `dir` must be a valid C string; `out` writable.
 */
enum OodStatus ood_detector_load(const char *dir, struct OodDetector **out);

/*
 Method name of the detector as a static string, or NULL for a NULL handle.

 # Safety
 `detector` must be NULL or a live handle.
 */
const char *ood_detector_method(const struct OodDetector *detector);

/*
 Releases a detector. NULL is ignored.

 # Safety
 `detector` must come from this library and not be used afterwards.
 */
void ood_detector_free(struct OodDetector *detector);

/*
 AUROC, AUPR-In and FPR at 95% TPR of ID scores against OOD scores.

 # Safety
 `id` and `ood` must hold `n_id` and `n_ood` doubles; `out` writable.
 */
enum OodStatus ood_evaluate(const double *id,
                            size_t n_id,
                            const double *ood,
                            size_t n_ood,
                            struct OodOutcome *out);

/*
 FPR at the first threshold whose TPR reaches `tpr_target` in (0, 1].

 # Safety
 `id` and `ood` must hold `n_id` and `n_ood` doubles; `out` writable.
 */
enum OodStatus ood_fpr_at_tpr(const double *id,
                              size_t n_id,
                              const double *ood,
                              size_t n_ood,
                              double tpr_target,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OODBENCH_H */
