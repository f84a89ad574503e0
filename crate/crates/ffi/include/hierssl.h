#ifndef HIERSSL_H
#define HIERSSL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Config, data and training errors match the CLI exit codes.
 */
typedef enum HierStatus {
  HIER_STATUS_OK = 0,
  HIER_STATUS_NULL_POINTER = 1,
  HIER_STATUS_CONFIG = 2,
  HIER_STATUS_DATA = 3,
  HIER_STATUS_TRAIN = 4,
  HIER_STATUS_PANIC = 5,
  HIER_STATUS_BUFFER_TOO_SMALL = 6,
  HIER_STATUS_INVALID_UTF8 = 7,
} HierStatus;

/**
 * Opaque model handle.
 */
typedef struct HierModel HierModel;

/**
 * Opaque taxonomy handle.
 */
typedef struct HierTaxonomy HierTaxonomy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after a
 * success. Valid until the next call into this library on the same thread.
 */
const char *hierssl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hierssl_version(void);

/**
 * Loads a taxonomy CSV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HierStatus hierssl_taxonomy_load(const char *path, struct HierTaxonomy **out);

/**
 * Parses taxonomy CSV text.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HierStatus hierssl_taxonomy_from_text(const char *text, struct HierTaxonomy **out);

/**
 * Releases a taxonomy. Null is ignored.
 *
 * # Safety
 * `taxonomy` must come from this library and not be used afterwards.
 */
void hierssl_taxonomy_free(struct HierTaxonomy *taxonomy);

/**
 * Number of levels, or 0 for a null handle.
 *
 * # Safety
 * `taxonomy` must be null or a live handle.
 */
size_t hierssl_taxonomy_num_levels(const struct HierTaxonomy *taxonomy);

/**
 * Number of classes at `level` (0 = coarsest).
 *
 * # Safety
 * `taxonomy` must be a live handle and `out` a valid pointer.
 */
enum HierStatus hierssl_taxonomy_num_classes(const struct HierTaxonomy *taxonomy,
                                             size_t level,
                                             size_t *out);

/**
 * Ancestor of leaf `leaf` at `level`.
 *
 * # Safety
 * `taxonomy` must be a live handle and `out` a valid pointer.
 */
enum HierStatus hierssl_taxonomy_ancestor(const struct HierTaxonomy *taxonomy,
                                          size_t leaf,
                                          size_t level,
                                          size_t *out);

/**
 * Sums leaf probabilities into the classes of `level`. `out_len` must be
 * at least the class count of `level`.
 *
 * # Safety
 * `leaf_probs` must point to `n_leaves` doubles and `out` to `out_len`.
 */
enum HierStatus hierssl_taxonomy_marginalize(const struct HierTaxonomy *taxonomy,
                                             const double *leaf_probs,
                                             size_t n_leaves,
                                             size_t level,
                                             double *out,
                                             size_t out_len);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HierStatus hierssl_model_load(const char *path, struct HierModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void hierssl_model_free(struct HierModel *model);

/**
 * Input dimension, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t hierssl_model_input_dim(const struct HierModel *model);

/**
 * Number of leaf classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t hierssl_model_num_classes(const struct HierModel *model);

/**
 * Leaf probabilities for one feature vector.
 *
 * # Safety
 * `features` must point to `n_features` doubles and `out` to `out_len`.
 */
enum HierStatus hierssl_model_predict(const struct HierModel *model,
                                      const double *features,
                                      size_t n_features,
                                      double *out,
                                      size_t out_len);

/**
 * Trains the experiment described by config text (`key = value` lines,
 * same format as the CLI) and returns the model and its test top-1.
 *
 * # Safety
 * `config_text` must be a NUL-terminated string; `out_model` and
 * `out_top1` must be valid pointers.
 */
enum HierStatus hierssl_train(const char *config_text,
                              struct HierModel **out_model,
                              double *out_top1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HIERSSL_H */
