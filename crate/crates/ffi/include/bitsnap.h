#ifndef BITSNAP_H
#define BITSNAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BsStatus {
  BS_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8, or an out-of-range parameter.
   */
  BS_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Malformed or unsupported serialized data.
   */
  BS_STATUS_FORMAT = 2,
  /**
   * Inputs disagree in shape, type, name or length.
   */
  BS_STATUS_MISMATCH = 3,
  BS_STATUS_NOT_FOUND = 4,
  /**
   * Digest, manifest, tracker or chain inconsistency on disk.
   */
  BS_STATUS_CORRUPT = 5,
  BS_STATUS_IO = 6,
  /**
   * Another writer holds the store lock.
   */
  BS_STATUS_LOCKED = 7,
  /**
   * Iteration not newer than what is already stored.
   */
  BS_STATUS_STALE = 8,
  /**
   * A Rust panic was caught at the boundary.
   */
  BS_STATUS_PANIC = 9,
  BS_STATUS_INTERNAL = 10,
} BsStatus;

/**
 * Opaque checkpoint store handle.
 */
typedef struct BsStore BsStore;

/**
 * Byte buffer allocated by this library.
 */
typedef struct BsBuffer {
  uint8_t *data;
  size_t len;
  size_t capacity;
} BsBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *bs_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bs_version(void);

/**
 * Releases a buffer's memory and resets it to empty. Safe to call twice.
 *
 * # Safety
 * `buf` must be null or point to a buffer filled by this library.
 */
void bs_buffer_free(struct BsBuffer *buf);

/**
 * 64-bit digest used to validate staged payloads.
 *
 * # Safety
 * `data` must point to `len` readable bytes (or be null with `len == 0`).
 */
uint64_t bs_checksum(const uint8_t *data, size_t len);

/**
 * Exact length of the record `bs_delta_encode` produces for `n` F16 elements
 * with `changed` of them different.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum BsStatus bs_delta_size_bytes(uint64_t n, uint64_t changed, uint64_t *out);

/**
 * Encoded size of `n` F32 elements quantized with `clusters` clusters.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum BsStatus bs_quantized_size_bytes(uint64_t n, size_t clusters, uint64_t *out);

/**
 * Bitmask delta of `target` against `base`, both `n` F16 bit patterns.
 *
 * # Safety
 * `base` and `target` must point to `n` elements; `out` to a writable buffer.
 */
enum BsStatus bs_delta_encode(const uint16_t *base,
                              const uint16_t *target,
                              size_t n,
                              struct BsBuffer *out);

/**
 * Applies an encoded delta to `base` (`n` elements), writing `n` elements to `out`.
 *
 * # Safety
 * `base` and `out` must hold `n` elements; `record` must hold `record_len` bytes.
 */
enum BsStatus bs_delta_decode(const uint16_t *base,
                              size_t n,
                              const uint8_t *record,
                              size_t record_len,
                              uint16_t *out);

/**
 * Cluster-quantizes `n` F32 values with `clusters` clusters (2..=16).
 *
 * # Safety
 * `values` must point to `n` floats; `out` to a writable buffer.
 */
enum BsStatus bs_quantize_f32(const float *values, size_t n, size_t clusters, struct BsBuffer *out);

/**
 * Reconstructs `n` F32 values from a quantized blob.
 *
 * # Safety
 * `data` must hold `len` bytes; `out` must hold `n` floats.
 */
enum BsStatus bs_dequantize_f32(const uint8_t *data, size_t len, float *out, size_t n);

/**
 * Opens (creating if needed) a store rooted at `root`. `max_cached` and
 * `clusters` of 0 select the defaults.
 *
 * # Safety
 * `root` must be a NUL-terminated string; `out` a valid pointer.
 */
enum BsStatus bs_store_open(const char *root,
                            size_t max_cached,
                            size_t clusters,
                            struct BsStore **out);

/**
 * # Safety
 * `store` must be null or a handle from [`bs_store_open`] not yet closed.
 */
void bs_store_close(struct BsStore *store);

/**
 * Saves the checkpoint file at `input_path` as `iteration`. Base or delta
 * is chosen by the store; `kind_out` (optional) receives 0 for base, 1 for delta.
 *
 * # Safety
 * `store` must be a live handle; `input_path` NUL-terminated; `kind_out` null or valid.
 */
enum BsStatus bs_store_save_file(struct BsStore *store,
                                 uint64_t iteration,
                                 const char *input_path,
                                 uint32_t *kind_out);

/**
 * Reconstructs `iteration` (the latest when `has_iteration` is 0) into a
 * checkpoint file at `output_path`.
 *
 * # Safety
 * `store` must be a live handle; `output_path` NUL-terminated.
 */
enum BsStatus bs_store_load_file(const struct BsStore *store,
                                 int32_t has_iteration,
                                 uint64_t iteration,
                                 const char *output_path);

/**
 * Reads the tracker: latest committed iteration and its base.
 *
 * # Safety
 * `store` must be a live handle; `latest` and `base` valid pointers.
 */
enum BsStatus bs_store_latest(const struct BsStore *store, uint64_t *latest, uint64_t *base);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BITSNAP_H */
