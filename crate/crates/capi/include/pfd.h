#ifndef PFD_H
#define PFD_H

/* Generated by cbindgen from pfd-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum PfdStatus {
  PfdOk = 0,
  PfdNullArgument = 1,
  PfdInvalidArgument = 2,
  PfdIoError = 3,
  PfdFormatError = 4,
  PfdNumericError = 5,
  PfdInternalError = 6,
} PfdStatus;

/**
 * Opaque detector handle; create with `pfd_detector_load`, release with
 * `pfd_detector_free`.
 */
typedef struct PfdDetector PfdDetector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pfd_version(void);

/**
 * Message of the last error observed on this thread (empty when none).
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *pfd_last_error(void);

/**
 * Loads detector weights (the `PFNW` format written by the trainer).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 * On success `*out` owns the detector and must be released with
 * `pfd_detector_free`.
 */
enum PfdStatus pfd_detector_load(const char *path, struct PfdDetector **out);

/**
 * Releases a detector handle; a null handle is a no-op.
 *
 * # Safety
 * `det` must be null or a pointer returned by `pfd_detector_load` that has
 * not been freed yet.
 */
void pfd_detector_free(struct PfdDetector *det);

/**
 * Expected input layout (channels, height, width) of the detector.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PfdStatus pfd_detector_input_shape(const struct PfdDetector *det,
                                        uint32_t *channels,
                                        uint32_t *height,
                                        uint32_t *width);

/**
 * Scores one image: writes the adversarial (class-1) probability to `score`.
 * `pixels` is row-major channels x height x width in [0,1]; `len` must equal
 * the product of the input shape.
 *
 * # Safety
 * `pixels` must point to `len` readable floats and `score` must be valid.
 */
enum PfdStatus pfd_detector_score(const struct PfdDetector *det,
                                  const float *pixels,
                                  uintptr_t len,
                                  float *score);

/**
 * Scores `count` images stored back to back (each of the input-shape size);
 * writes one probability per image into `scores`.
 *
 * # Safety
 * `pixels` must hold `count * input_size` floats and `scores` must have room
 * for `count` floats.
 */
enum PfdStatus pfd_detector_score_batch(const struct PfdDetector *det,
                                        const float *pixels,
                                        uintptr_t count,
                                        float *scores);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PFD_H */
