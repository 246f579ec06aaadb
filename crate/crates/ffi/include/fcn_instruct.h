#ifndef FCN_INSTRUCT_H
#define FCN_INSTRUCT_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum FcnStatus {
  FCN_STATUS_OK = 0,
  FCN_STATUS_NULL_ARGUMENT = 1,
  FCN_STATUS_INVALID_UTF8 = 2,
  FCN_STATUS_INVALID_INPUT = 3,
  FCN_STATUS_CONFIG = 4,
  FCN_STATUS_GENERATION = 5,
  FCN_STATUS_DATASET = 6,
  FCN_STATUS_TRAINING = 7,
  FCN_STATUS_FORMAT = 8,
  FCN_STATUS_IO = 9,
  FCN_STATUS_PANIC = 10,
} FcnStatus;

/**
 * Region-to-subnetwork partition.
 */
typedef struct FcnAtlasHandle FcnAtlasHandle;

/**
 * Pearson connectivity matrix.
 */
typedef struct FcnMatrixHandle FcnMatrixHandle;

/**
 * Trained encoder and language model with its vocabulary.
 */
typedef struct FcnModelHandle FcnModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fcn_last_error_message(void);

void fcn_clear_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fcn_version(void);

/**
 * Number of sliding windows of length `len` and stride `step` in `t`
 * samples; 0 when `len > t` or `step == 0`.
 */
uintptr_t fcn_window_count(uintptr_t t, uintptr_t len, uintptr_t step);

/**
 * Maps `x` in `[min, max]` to an integer in `0..=100`.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `uint8_t`.
 */
enum FcnStatus fcn_normalize_value(double x, double min, double max, uint8_t *out);

/**
 * Extracts a `0..=100` value from model output. Writes -1 when none is
 * found; that is not an error.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must point to one `int32_t`.
 */
enum FcnStatus fcn_parse_value_response(const char *text, int32_t *out);

/**
 * Pearson FCN of a row-major `time_points x regions` BOLD array.
 *
 * # Safety
 * `samples` must point to `time_points * regions` readable doubles and
 * `out` to a writable handle pointer.
 */
enum FcnStatus fcn_matrix_from_bold(const double *samples,
                                    uintptr_t time_points,
                                    uintptr_t regions,
                                    struct FcnMatrixHandle **out);

/**
 * Reads a binary FCN file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable handle pointer.
 */
enum FcnStatus fcn_matrix_read(const char *path, struct FcnMatrixHandle **out);

/**
 * # Safety
 * `matrix` must be a live handle and `path` a NUL-terminated string.
 */
enum FcnStatus fcn_matrix_write(const struct FcnMatrixHandle *matrix, const char *path);

/**
 * Number of regions; 0 for a null handle.
 *
 * # Safety
 * `matrix` must be null or a live handle.
 */
uintptr_t fcn_matrix_dim(const struct FcnMatrixHandle *matrix);

/**
 * Copies the row-major `dim x dim` values into `out`.
 *
 * # Safety
 * `matrix` must be a live handle and `out` must hold `len` doubles.
 */
enum FcnStatus fcn_matrix_values(const struct FcnMatrixHandle *matrix, double *out, uintptr_t len);

/**
 * # Safety
 * `matrix` must be null or a handle not yet freed.
 */
void fcn_matrix_free(struct FcnMatrixHandle *matrix);

/**
 * Synthetic atlas: leading regions dealt to subnetworks in turn, the last
 * `unassigned` left out.
 *
 * # Safety
 * `out` must be a writable handle pointer.
 */
enum FcnStatus fcn_atlas_round_robin(uintptr_t rois,
                                     uintptr_t subnets,
                                     uintptr_t unassigned,
                                     struct FcnAtlasHandle **out);

/**
 * Reads an atlas CSV (`roi,subnet` rows).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable handle pointer.
 */
enum FcnStatus fcn_atlas_load(const char *path, struct FcnAtlasHandle **out);

/**
 * Tokens per FCN: regions, subnetworks and one global token.
 *
 * # Safety
 * `atlas` must be null or a live handle.
 */
uintptr_t fcn_atlas_token_count(const struct FcnAtlasHandle *atlas);

/**
 * # Safety
 * `atlas` must be null or a handle not yet freed.
 */
void fcn_atlas_free(struct FcnAtlasHandle *atlas);

/**
 * Loads a trained checkpoint directory (one holding an encoder).
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable handle pointer.
 */
enum FcnStatus fcn_model_load(const char *dir, struct FcnModelHandle **out);

/**
 * Greedy answer to `prompt`, whose `<fcn>` placeholders take `fcns` in
 * order. The string written to `out` must be released with
 * [`fcn_string_free`].
 *
 * # Safety
 * `model` and `atlas` must be live handles, `fcns` must point to `n_fcns`
 * live matrix handles, `prompt` must be NUL-terminated and `out` writable.
 */
enum FcnStatus fcn_model_answer(const struct FcnModelHandle *model,
                                const struct FcnAtlasHandle *atlas,
                                const char *prompt,
                                const struct FcnMatrixHandle *const *fcns,
                                uintptr_t n_fcns,
                                uintptr_t max_answer_len,
                                char **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void fcn_model_free(struct FcnModelHandle *model);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void fcn_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FCN_INSTRUCT_H */
