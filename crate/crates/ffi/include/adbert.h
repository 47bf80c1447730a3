#ifndef ADBERT_H
#define ADBERT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AdbertStatus {
  ADBERT_STATUS_OK = 0,
  ADBERT_STATUS_NULL_POINTER = 1,
  ADBERT_STATUS_INVALID_UTF8 = 2,
  ADBERT_STATUS_CONFIG = 3,
  ADBERT_STATUS_INPUT = 4,
  ADBERT_STATUS_MISSING_ARTIFACT = 5,
  ADBERT_STATUS_CHECKPOINT = 6,
  ADBERT_STATUS_METRIC = 7,
  ADBERT_STATUS_IO = 8,
  ADBERT_STATUS_INTERNAL = 9,
} AdbertStatus;

/**
 * A fine-tuned encoder with its vocabulary.
 */
typedef struct AdbertModel AdbertModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The most recent error message on this thread, or null. The pointer is
 * valid until the next failing call on this thread.
 */
const char *adbert_last_error(void);

/**
 * Static version string.
 */
const char *adbert_version(void);

/**
 * Load a checkpoint and the vocabulary it was trained with.
 *
 * # Safety
 * Path arguments are NUL-terminated strings; `out` is writable.
 */
enum AdbertStatus adbert_model_load(const char *checkpoint_path,
                                    const char *vocab_path,
                                    struct AdbertModel **out);

/**
 * # Safety
 * `model` is null or came from [`adbert_model_load`] and is not used again.
 */
void adbert_model_free(struct AdbertModel *model);

/**
 * Case probability for one patient given its preprocessed sections.
 *
 * # Safety
 * `sections` points to `n_sections` NUL-terminated strings; `out` is writable.
 */
enum AdbertStatus adbert_model_predict(const struct AdbertModel *model,
                                       const char *const *sections,
                                       size_t n_sections,
                                       double *out);

/**
 * Deidentify, clean and split a raw note. `*out` receives the sections
 * joined by newlines; release it with [`adbert_string_free`].
 *
 * # Safety
 * `raw` is a NUL-terminated string; `out` is writable.
 */
enum AdbertStatus adbert_preprocess_note(const char *raw, char **out);

/**
 * # Safety
 * `s` is null or came from this library and is not used again.
 */
void adbert_string_free(char *s);

/**
 * Rank-based AUC. `labels[i]` is nonzero for a case.
 *
 * # Safety
 * `scores` and `labels` point to `n` elements; `out` is writable.
 */
enum AdbertStatus adbert_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADBERT_H */
