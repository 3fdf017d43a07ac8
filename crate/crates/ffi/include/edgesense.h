#ifndef EDGESENSE_H
#define EDGESENSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EsStatus {
  ES_STATUS_OK = 0,
  ES_STATUS_NULL_POINTER = 1,
  ES_STATUS_INVALID_ARGUMENT = 2,
  ES_STATUS_PARSE = 3,
  ES_STATUS_VALIDATION = 4,
  ES_STATUS_IO = 5,
  ES_STATUS_SHAPE = 6,
  ES_STATUS_TRAINING = 7,
  ES_STATUS_SIMULATION = 8,
  ES_STATUS_CONFIG = 9,
  ES_STATUS_BUFFER_TOO_SMALL = 10,
  ES_STATUS_PANIC = 11,
} EsStatus;

/**
 * Float classifier (compact models are dequantized on load).
 */
typedef struct EsModel EsModel;

/**
 * Parsed, aligned telemetry record.
 */
typedef struct EsRecord EsRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *es_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length excluding the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t es_last_error_message(char *buf, size_t len);

/**
 * Parses a telemetry CSV log and aligns it to 100 Hz.
 *
 * # Safety
 * `bytes` must be valid for `len` bytes; `out` must be a valid pointer.
 */
enum EsStatus es_record_parse(const uint8_t *bytes, size_t len, struct EsRecord **out);

/**
 * Number of samples in a record, or 0 for null.
 *
 * # Safety
 * `record` must be null or a live handle.
 */
size_t es_record_len(const struct EsRecord *record);

/**
 * # Safety
 * `record` must be null or a handle not yet freed.
 */
void es_record_free(struct EsRecord *record);

/**
 * Loads a float or compact model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum EsStatus es_model_load(const char *path, struct EsModel **out);

/**
 * Frames per input window, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t es_model_input_len(const struct EsModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void es_model_free(struct EsModel *model);

/**
 * Class probabilities for one window of raw fused features laid out
 * frame-major (`frames × 3`). Writes two values to `out_probs`.
 *
 * # Safety
 * `features` must be valid for `frames * 3` doubles, `out_probs` for 2.
 */
enum EsStatus es_model_predict(const struct EsModel *model,
                               const double *features,
                               size_t frames,
                               double *out_probs);

/**
 * Runs the full pipeline on a record and writes gated edge times (s).
 *
 * `config_json` may be null for defaults. When `capacity` is too small the
 * call fails with `ES_STATUS_BUFFER_TOO_SMALL` and `out_count` still holds
 * the number of edges.
 *
 * # Safety
 * Handles must be live; `out_times` valid for `capacity` doubles (may be
 * null when `capacity` is 0); `out_count` must be valid.
 */
enum EsStatus es_detect(const struct EsModel *model,
                        const struct EsRecord *record,
                        const char *config_json,
                        double *out_times,
                        size_t capacity,
                        size_t *out_count);

/**
 * CFAR scaling factor `N·(P_FA^(−1/N) − 1)`.
 *
 * # Safety
 * `out` must be valid.
 */
enum EsStatus es_cfar_alpha(size_t leading_window, double p_fa, double *out);

/**
 * Leading-window CFAR over `x`; writes 0/1 alerts and thresholds
 * (`+inf` during warm-up). `out_thresholds` may be null.
 *
 * # Safety
 * `x` and `out_alerts` must be valid for `len` elements, `out_thresholds`
 * null or valid for `len`.
 */
enum EsStatus es_fr_cfar(const double *x,
                         size_t len,
                         size_t leading_window,
                         size_t guard_cells,
                         double p_fa,
                         uint8_t *out_alerts,
                         double *out_thresholds);

/**
 * Idealized compression ratio `32/((1 − sparsity)·bits)`.
 */
double es_compression_ratio(double sparsity, uint32_t bits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDGESENSE_H */
