#ifndef EDGELOOP_H
#define EDGELOOP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EdgeloopStatus {
  EDGELOOP_STATUS_OK = 0,
  EDGELOOP_STATUS_NULL_ARGUMENT = 1,
  EDGELOOP_STATUS_INVALID_ARGUMENT = 2,
  EDGELOOP_STATUS_IO = 3,
  // Malformed image or image data.
  EDGELOOP_STATUS_DATA = 4,
  // Malformed exchange file.
  EDGELOOP_STATUS_FORMAT = 5,
  // The model uses an operator or attribute the runtime does not support.
  EDGELOOP_STATUS_UNSUPPORTED = 6,
  EDGELOOP_STATUS_BUFFER_TOO_SMALL = 7,
  EDGELOOP_STATUS_INTERNAL = 8,
} EdgeloopStatus;

// Bytes owned by the library.
typedef struct EdgeloopBuffer EdgeloopBuffer;

// A loaded model.
typedef struct EdgeloopSession EdgeloopSession;

typedef struct EdgeloopPrediction {
  uint32_t class_id;
  // Confidence of `class_id`, in percent.
  double confidence_pct;
  double latency_ms;
  double preprocess_ms;
} EdgeloopPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *edgeloop_last_error(void);

// Library version as a static NUL-terminated string.
const char *edgeloop_version(void);

// Load an exchange file from memory. The file is validated against the
// default support table before anything runs.
//
// # Safety
// `data` must point to `len` readable bytes and `out` to writable storage
// for one pointer.
enum EdgeloopStatus edgeloop_session_load(const uint8_t *data,
                                          size_t len,
                                          struct EdgeloopSession **out);

// Load an exchange file from a path.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable storage for one
// pointer.
enum EdgeloopStatus edgeloop_session_load_file(const char *path, struct EdgeloopSession **out);

// Release a session. Null is ignored.
//
// # Safety
// `s` must come from a load function and not have been freed.
void edgeloop_session_free(struct EdgeloopSession *s);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `s` must be null or a live session.
size_t edgeloop_session_num_classes(const struct EdgeloopSession *s);

// Size of the loaded file in bytes, or 0 for a null handle.
//
// # Safety
// `s` must be null or a live session.
uint64_t edgeloop_session_storage_bytes(const struct EdgeloopSession *s);

// Side length of the model input, or 0 for a null handle.
//
// # Safety
// `s` must be null or a live session.
size_t edgeloop_session_image_size(const struct EdgeloopSession *s);

// Classify a binary PPM image. `confidences` may be null; otherwise it
// receives one percentage per class and must hold `capacity >= num_classes`.
//
// # Safety
// `data` must point to `len` readable bytes, `out` to one writable
// prediction, and `confidences` (if non-null) to `capacity` writable doubles.
enum EdgeloopStatus edgeloop_predict_ppm(const struct EdgeloopSession *s,
                                         const uint8_t *data,
                                         size_t len,
                                         struct EdgeloopPrediction *out,
                                         double *confidences,
                                         size_t capacity);

// Classify interleaved 8-bit RGB pixels, row-major, `width * height * 3` bytes.
//
// # Safety
// As [`edgeloop_predict_ppm`], with `pixels` holding `width * height * 3` bytes.
enum EdgeloopStatus edgeloop_predict_rgb(const struct EdgeloopSession *s,
                                         const uint8_t *pixels,
                                         size_t width,
                                         size_t height,
                                         struct EdgeloopPrediction *out,
                                         double *confidences,
                                         size_t capacity);

// Count support violations of an exchange file against the default table.
// Returns `Ok` with the count for any well-formed file.
//
// # Safety
// `data` must point to `len` readable bytes and `violations` to one
// writable `size_t`.
enum EdgeloopStatus edgeloop_check(const uint8_t *data, size_t len, size_t *violations);

// Rewrite flattening `Reshape` nodes into `Flatten`. The result is a new
// buffer, identical to the input when there was nothing to rewrite.
//
// # Safety
// `data` must point to `len` readable bytes and `out` to writable storage
// for one pointer.
enum EdgeloopStatus edgeloop_rewrite(const uint8_t *data, size_t len, struct EdgeloopBuffer **out);

// Start of the buffer's bytes, or null for a null handle.
//
// # Safety
// `b` must be null or a live buffer.
const uint8_t *edgeloop_buffer_data(const struct EdgeloopBuffer *b);

// # Safety
// `b` must be null or a live buffer.
size_t edgeloop_buffer_len(const struct EdgeloopBuffer *b);

// Release a buffer. Null is ignored.
//
// # Safety
// `b` must come from [`edgeloop_rewrite`] and not have been freed.
void edgeloop_buffer_free(struct EdgeloopBuffer *b);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDGELOOP_H */
