#ifndef DYSFLUENCY_H
#define DYSFLUENCY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. The numeric values are stable.
typedef enum DysfStatus {
  DYSF_STATUS_OK = 0,
  // A required pointer was null or a size was inconsistent.
  DYSF_STATUS_INVALID_ARGUMENT = 1,
  DYSF_STATUS_CONFIG = 2,
  DYSF_STATUS_DATA = 3,
  DYSF_STATUS_NUMERIC = 4,
  DYSF_STATUS_IO = 5,
  // An internal panic was caught at the boundary.
  DYSF_STATUS_INTERNAL = 6,
} DysfStatus;

// A loaded detector.
typedef struct DysfModel DysfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *dysf_last_error(void);

// Library version as a static NUL-terminated string.
const char *dysf_version(void);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void dysf_string_free(char *s);

// Loads a checkpoint. On success `*out` owns a new model.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DysfStatus dysf_model_load(const char *path, struct DysfModel **out);

// # Safety
// `model` must be null or a handle from [`dysf_model_load`], freed once.
void dysf_model_free(struct DysfModel *model);

// Number of feature channels the model expects per frame.
//
// # Safety
// `model` must be a live handle.
size_t dysf_model_feature_dim(const struct DysfModel *model);

// Predicts the label string (`Tag;Tag` or `None`) for one clip.
//
// `features` holds `frames × dim` row-major values, `hypothesis` the
// recognizer output and `mode` one of `1-best`, `N-best`, `Phon`, `MBR`.
//
// # Safety
// Pointers must be valid for the given sizes; `out` receives a string to
// release with [`dysf_string_free`].
enum DysfStatus dysf_model_predict(const struct DysfModel *model,
                                   const float *features,
                                   size_t frames,
                                   size_t dim,
                                   const char *hypothesis,
                                   const char *mode,
                                   char **out);

// Parses free text into labels of `schema` and writes the canonical form.
//
// # Safety
// `text` and `schema` must be NUL-terminated; `out` receives a string to
// release with [`dysf_string_free`].
enum DysfStatus dysf_labels_normalize(const char *text, const char *schema, char **out);

// Word error rate of whitespace-separated `hypothesis` against `reference`.
//
// # Safety
// Strings must be NUL-terminated and `out` valid.
enum DysfStatus dysf_word_error_rate(const char *hypothesis, const char *reference, double *out);

// Levenshtein distance between two token id arrays.
//
// # Safety
// Each array must hold its length in elements (null is allowed for 0).
enum DysfStatus dysf_edit_distance(const uint32_t *a,
                                   size_t a_len,
                                   const uint32_t *b,
                                   size_t b_len,
                                   size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYSFLUENCY_H */
