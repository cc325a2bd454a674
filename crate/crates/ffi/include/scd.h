#ifndef SCD_H
#define SCD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ScdStatus {
  ScdStatus_Ok = 0,
  ScdStatus_NullPointer = 1,
  ScdStatus_InvalidArgument = 2,
  ScdStatus_Shape = 3,
  ScdStatus_ClassOutOfRange = 4,
  ScdStatus_NonFinite = 5,
  ScdStatus_Dataset = 6,
  ScdStatus_Checkpoint = 7,
  ScdStatus_Config = 8,
  ScdStatus_Io = 9,
  ScdStatus_Panic = 10,
} ScdStatus;

/**
 * Streaming confusion matrix.
 */
typedef struct ScdConfusion ScdConfusion;

/**
 * Trained network with its parameters.
 */
typedef struct ScdModel ScdModel;

/**
 * Scores of a confusion matrix.
 */
typedef struct ScdScores {
  double oa;
  double miou;
  double sek;
  double f1;
} ScdScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message into `buf` (NUL-terminated, truncated to
 * `len`). Returns the full message length, or 0 when there is none.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
uintptr_t scd_last_error_message(char *buf, uintptr_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *scd_version(void);

/**
 * Load a checkpoint written by the training command.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ScdStatus scd_model_load(const char *path, struct ScdModel **out);

/**
 * # Safety
 * `model` must come from [`scd_model_load`] and not be used afterwards.
 */
void scd_model_free(struct ScdModel *model);

/**
 * Number of semantic classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t scd_model_classes(const struct ScdModel *model);

/**
 * Predict one pair. Images are planar `[3][height][width]` floats in
 * `[0, 1]`; each output holds `height * width` values. `sem1`/`sem2` get
 * class indices (0 where no change), `change_prob` the change probability.
 *
 * # Safety
 * Inputs must be valid for `3 * height * width` floats and outputs for
 * `height * width` elements.
 */
enum ScdStatus scd_model_predict(const struct ScdModel *model,
                                 const float *image_t1,
                                 const float *image_t2,
                                 uintptr_t height,
                                 uintptr_t width,
                                 uint8_t *sem1,
                                 uint8_t *sem2,
                                 float *change_prob);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum ScdStatus scd_confusion_new(uintptr_t classes, struct ScdConfusion **out);

/**
 * # Safety
 * `cm` must come from [`scd_confusion_new`] and not be used afterwards.
 */
void scd_confusion_free(struct ScdConfusion *cm);

/**
 * Count `len` (prediction, ground truth) pixel pairs.
 *
 * # Safety
 * `pred` and `gt` must be valid for `len` bytes.
 */
enum ScdStatus scd_confusion_update(struct ScdConfusion *cm,
                                    const uint8_t *pred,
                                    const uint8_t *gt,
                                    uintptr_t len);

/**
 * # Safety
 * `cm` must be a live handle and `out` a valid pointer.
 */
enum ScdStatus scd_confusion_scores(const struct ScdConfusion *cm, struct ScdScores *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCD_H */
