#ifndef MTAC_H
#define MTAC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a call. Values 2 to 5 match the command-line exit codes.
 */
typedef enum MtacStatus {
  MTAC_STATUS_OK = 0,
  MTAC_STATUS_INTERNAL = 1,
  MTAC_STATUS_CONFIG = 2,
  MTAC_STATUS_CHECKPOINT = 3,
  MTAC_STATUS_BITSTREAM = 4,
  MTAC_STATUS_EVAL_INPUT = 5,
  MTAC_STATUS_INVALID_ARGUMENT = 6,
  MTAC_STATUS_SHAPE = 7,
  MTAC_STATUS_NO_OVERLAP = 8,
  MTAC_STATUS_PANIC = 9,
} MtacStatus;

/**
 * A loaded adapted codec.
 */
typedef struct MtacCodec MtacCodec;

/**
 * The outputs of one decode.
 */
typedef struct MtacDecoded MtacDecoded;

/**
 * Bytes owned by the library; release with [`mtac_buffer_free`].
 */
typedef struct MtacBuffer {
  uint8_t *data;
  size_t len;
} MtacBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mtac_version(void);

/**
 * Message of the last failure on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mtac_last_error(void);

/**
 * Loads an adapted codec from its base, predictor and adaptation
 * checkpoints. Fails with `MTAC_STATUS_CHECKPOINT` if the adaptation was
 * trained against a different base or predictor set.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum MtacStatus mtac_codec_open(const char *base_path,
                                const char *predictors_path,
                                const char *adapted_path,
                                struct MtacCodec **out);

/**
 * # Safety
 * `codec` must come from [`mtac_codec_open`] and not be used afterwards.
 * NULL is ignored.
 */
void mtac_codec_free(struct MtacCodec *codec);

/**
 * Number of tasks the codec decodes; 0 for NULL.
 *
 * # Safety
 * `codec` must be NULL or a live handle.
 */
size_t mtac_codec_num_tasks(const struct MtacCodec *codec);

/**
 * Name of task `index`, owned by the codec; NULL when out of range.
 *
 * # Safety
 * `codec` must be NULL or a live handle.
 */
const char *mtac_codec_task_name(const struct MtacCodec *codec, size_t index);

/**
 * Encodes one interleaved 8-bit RGB image (`height * width * 3` bytes,
 * row-major) into a bitstream. The bytes do not depend on which tasks
 * will later be decoded.
 *
 * # Safety
 * `codec` must be a live handle, `rgb` must hold `height * width * 3`
 * bytes, `out` must be writable.
 */
enum MtacStatus mtac_encode(const struct MtacCodec *codec,
                            const uint8_t *rgb,
                            uint32_t width,
                            uint32_t height,
                            struct MtacBuffer *out);

/**
 * Releases a buffer from [`mtac_encode`] and resets it to empty.
 *
 * # Safety
 * `buf` must be NULL or point to a buffer filled by this library.
 */
void mtac_buffer_free(struct MtacBuffer *buf);

/**
 * Decodes a bitstream for a comma-separated task list (NULL or empty for
 * every task). Corrupt input fails with `MTAC_STATUS_BITSTREAM` and a
 * message giving the byte offset.
 *
 * # Safety
 * `codec` must be a live handle, `data` must hold `len` bytes, `tasks`
 * must be NULL or NUL-terminated, `out` must be writable.
 */
enum MtacStatus mtac_decode(const struct MtacCodec *codec,
                            const uint8_t *data,
                            size_t len,
                            const char *tasks,
                            struct MtacDecoded **out);

/**
 * # Safety
 * `decoded` must be NULL or come from [`mtac_decode`]; it is invalid
 * afterwards.
 */
void mtac_decoded_free(struct MtacDecoded *decoded);

/**
 * Image size of a decode.
 *
 * # Safety
 * `decoded` must be a live handle; the outputs must be writable.
 */
enum MtacStatus mtac_decoded_size(const struct MtacDecoded *decoded,
                                  uint32_t *width,
                                  uint32_t *height);

/**
 * Copies the human-viewing reconstruction as interleaved 8-bit RGB.
 *
 * # Safety
 * `decoded` must be a live handle and `rgb` must hold `capacity` bytes.
 */
enum MtacStatus mtac_decoded_image(const struct MtacDecoded *decoded,
                                   uint8_t *rgb,
                                   size_t capacity);

/**
 * Copies one task's raw prediction (`height * width * channels` values,
 * channels last). With `values` NULL only `channels` is filled, to size
 * the buffer.
 *
 * # Safety
 * `decoded` must be a live handle, `task` NUL-terminated, `values` NULL
 * or holding `capacity` doubles, `channels` writable.
 */
enum MtacStatus mtac_decoded_prediction(const struct MtacDecoded *decoded,
                                        const char *task,
                                        double *values,
                                        size_t capacity,
                                        size_t *channels);

/**
 * BD-Rate of `test` against `anchor`, in percent.
 *
 * # Safety
 * Each array must hold its stated length; `out` must be writable.
 */
enum MtacStatus mtac_bd_rate(const double *anchor_bpp,
                             const double *anchor_metric,
                             size_t anchor_len,
                             const double *test_bpp,
                             const double *test_metric,
                             size_t test_len,
                             bool higher_is_better,
                             double *out);

/**
 * BD-Acc of `test` against `anchor`, in metric units.
 *
 * # Safety
 * Each array must hold its stated length; `out` must be writable.
 */
enum MtacStatus mtac_bd_acc(const double *anchor_bpp,
                            const double *anchor_metric,
                            size_t anchor_len,
                            const double *test_bpp,
                            const double *test_metric,
                            size_t test_len,
                            bool higher_is_better,
                            double *out);

/**
 * Mean signed relative gain of `multi` over `single`, in percent. Tasks
 * are positional; a zero single-task value fails with
 * `MTAC_STATUS_EVAL_INPUT` naming `task<i>`.
 *
 * # Safety
 * The three arrays must hold `len` entries; `out` must be writable.
 */
enum MtacStatus mtac_delta_m(const double *multi,
                             const double *single,
                             const bool *higher_is_better,
                             size_t len,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTAC_H */
