#ifndef SEMCOM_H
#define SEMCOM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SemcomStatus {
  SEMCOM_STATUS_OK = 0,
  SEMCOM_STATUS_NULL_POINTER = 1,
  SEMCOM_STATUS_ARGUMENT = 2,
  SEMCOM_STATUS_SHAPE = 3,
  SEMCOM_STATUS_NUMERICAL = 4,
  SEMCOM_STATUS_CORRUPT_PACKET = 5,
  SEMCOM_STATUS_PRECONDITION = 6,
  SEMCOM_STATUS_CONFIG = 7,
  SEMCOM_STATUS_FORMAT = 8,
  SEMCOM_STATUS_IO = 9,
  SEMCOM_STATUS_BUFFER_TOO_SMALL = 10,
  SEMCOM_STATUS_PANIC = 11,
} SemcomStatus;

/**
 * Receiver-side reconstruction network.
 */
typedef struct SemcomDecoder SemcomDecoder;

/**
 * Trained encoder plus masking policy.
 */
typedef struct SemcomEncoder SemcomEncoder;

/**
 * One parsed or freshly built packet.
 */
typedef struct SemcomPacket SemcomPacket;

/**
 * Encoder geometry. `attention_scale` is 0 for `sqrt(D)`, 1 for
 * `sqrt(D / H)`.
 */
typedef struct SemcomVitConfig {
  uint32_t embed_dim;
  uint32_t heads;
  uint32_t layers;
  uint32_t mlp_hidden;
  uint32_t num_classes;
  uint32_t patch;
  uint32_t height;
  uint32_t width;
  uint32_t attention_scale;
} SemcomVitConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library from the same thread.
 */
const char *semcom_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *semcom_version(void);

/**
 * Writes the default toy encoder geometry to `out`.
 *
 * # Safety
 * `out` must be NULL or point to writable memory for one config.
 */
enum SemcomStatus semcom_vit_config_default(struct SemcomVitConfig *out);

/**
 * Number of patches sent at `rate` out of `num_patches`.
 *
 * # Safety
 * `out` must be NULL or point to a writable `uint32_t`.
 */
enum SemcomStatus semcom_budget_for_rate(double rate, uint32_t num_patches, uint32_t *out);

/**
 * Loads an encoder checkpoint written with geometry `config`.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `config` readable, `out`
 * writable.
 */
enum SemcomStatus semcom_encoder_load(const char *path,
                                      const struct SemcomVitConfig *config,
                                      struct SemcomEncoder **out);

/**
 * # Safety
 * `enc` must be NULL or a handle from [`semcom_encoder_load`] not yet freed.
 */
void semcom_encoder_free(struct SemcomEncoder *enc);

/**
 * Encodes one `(3, h, w)` channel-major image, selects patches at
 * `(rate, alpha)` with random fill from `seed`, and packs them.
 *
 * # Safety
 * `pixels` must point to `len` readable floats, `enc` must be a live
 * handle, `out` writable.
 */
enum SemcomStatus semcom_encoder_transmit(const struct SemcomEncoder *enc,
                                          const float *pixels,
                                          uintptr_t len,
                                          double rate,
                                          double alpha,
                                          uint64_t seed,
                                          uint32_t image_id,
                                          struct SemcomPacket **out);

/**
 * Parses wire bytes into a packet.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes, `out` writable.
 */
enum SemcomStatus semcom_packet_parse(const uint8_t *bytes,
                                      uintptr_t len,
                                      struct SemcomPacket **out);

/**
 * Serializes `packet`. `*out_len` always receives the encoded size; if
 * `buf` is NULL or `cap` is smaller, nothing is written and
 * `BufferTooSmall` is returned.
 *
 * # Safety
 * `packet` must be live, `buf` NULL or writable for `cap` bytes,
 * `out_len` writable.
 */
enum SemcomStatus semcom_packet_serialize(const struct SemcomPacket *packet,
                                          uint8_t *buf,
                                          uintptr_t cap,
                                          uintptr_t *out_len);

/**
 * Number of patch tokens the packet carries, or 0 for NULL.
 *
 * # Safety
 * `packet` must be NULL or live.
 */
uint32_t semcom_packet_n_selected(const struct SemcomPacket *packet);

/**
 * Patch count `P` from the header, or 0 for NULL.
 *
 * # Safety
 * `packet` must be NULL or live.
 */
uint32_t semcom_packet_num_patches(const struct SemcomPacket *packet);

/**
 * Image id from the header, or 0 for NULL.
 *
 * # Safety
 * `packet` must be NULL or live.
 */
uint32_t semcom_packet_image_id(const struct SemcomPacket *packet);

/**
 * # Safety
 * `packet` must be NULL or a live handle.
 */
void semcom_packet_free(struct SemcomPacket *packet);

/**
 * Loads a decoder checkpoint for tokens of width `embed_dim` on a
 * `height x width` image cut into `patch x patch` patches.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `out` writable.
 */
enum SemcomStatus semcom_decoder_load(const char *path,
                                      uint32_t embed_dim,
                                      uint32_t height,
                                      uint32_t width,
                                      uint32_t patch,
                                      struct SemcomDecoder **out);

/**
 * # Safety
 * `dec` must be NULL or a live handle.
 */
void semcom_decoder_free(struct SemcomDecoder *dec);

/**
 * Reconstructs the `(3, h, w)` image from `packet` into `out`, which must
 * hold `3 * h * w` floats (`cap`).
 *
 * # Safety
 * `dec` and `packet` must be live, `out` writable for `cap` floats.
 */
enum SemcomStatus semcom_decoder_reconstruct(const struct SemcomDecoder *dec,
                                             const struct SemcomPacket *packet,
                                             float *out,
                                             uintptr_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMCOM_H */
