#ifndef SPEAKERKWS_H
#define SPEAKERKWS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum KwsStatus {
  KWS_STATUS_OK = 0,
  KWS_STATUS_NULL_POINTER = 1,
  KWS_STATUS_INVALID_ARGUMENT = 2,
  KWS_STATUS_IO = 3,
  KWS_STATUS_CORRUPT_FILE = 4,
  KWS_STATUS_DIMENSION_MISMATCH = 5,
  KWS_STATUS_RUNTIME = 6,
  KWS_STATUS_PANIC = 7,
} KwsStatus;

// Loaded detector model.
typedef struct KwsModelHandle KwsModelHandle;

// Streaming session bound to one model and one speaker embedding.
typedef struct KwsStreamHandle KwsStreamHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *kws_last_error_message(void);

// Loads a checkpoint file into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum KwsStatus kws_model_load(const char *path, struct KwsModelHandle **out);

// Releases a model. Streams created from it stay usable.
//
// # Safety
// `model` must come from [`kws_model_load`] and not be freed twice.
void kws_model_free(struct KwsModelHandle *model);

// Features per input frame, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t kws_model_input_dim(const struct KwsModelHandle *model);

// Speaker embedding width, or 0 for unconditioned models and null handles.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t kws_model_embedding_dim(const struct KwsModelHandle *model);

// Posterior classes per frame, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t kws_model_num_classes(const struct KwsModelHandle *model);

// Opens a streaming session. `embedding` may be null, in which case a
// conditioned model uses the all-zero constant vector; otherwise it must
// hold exactly `embedding_len` values.
//
// # Safety
// `model` must be a live handle, `embedding` null or readable for
// `embedding_len` doubles, and `out` a valid pointer.
enum KwsStatus kws_stream_new(const struct KwsModelHandle *model,
                              const double *embedding,
                              uintptr_t embedding_len,
                              struct KwsStreamHandle **out);

// Pushes one frame of `frame_len` features and writes the frame's class
// posteriors into `posteriors` (capacity `posteriors_len`).
//
// # Safety
// `stream` must be a live handle, `frame` readable for `frame_len`
// doubles and `posteriors` writable for `posteriors_len` doubles.
enum KwsStatus kws_stream_push(struct KwsStreamHandle *stream,
                               const double *frame,
                               uintptr_t frame_len,
                               double *posteriors,
                               uintptr_t posteriors_len);

// Clears the session history, keeping its embedding.
//
// # Safety
// `stream` must be a live handle.
enum KwsStatus kws_stream_reset(struct KwsStreamHandle *stream);

// Frames pushed since creation or the last reset; 0 for a null handle.
//
// # Safety
// `stream` must be null or a live handle.
uint64_t kws_stream_frames(const struct KwsStreamHandle *stream);

// # Safety
// `stream` must come from [`kws_stream_new`] and not be freed twice.
void kws_stream_free(struct KwsStreamHandle *stream);

// Equal error rate of two score lists; see the core library for the
// threshold-sweep convention. `threshold` may be null.
//
// # Safety
// `positives`/`negatives` must be readable for their lengths; `eer` must be
// writable and `threshold` null or writable.
enum KwsStatus kws_compute_eer(const double *positives,
                               uintptr_t num_positives,
                               const double *negatives,
                               uintptr_t num_negatives,
                               double *eer,
                               double *threshold);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPEAKERKWS_H */
