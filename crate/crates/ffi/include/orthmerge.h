/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef ORTHMERGE_H
#define ORTHMERGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define ORTHMERGE_STRATEGY_DIRECT 0

#define ORTHMERGE_STRATEGY_DROPOUT 1

#define ORTHMERGE_STRATEGY_ORTHOGONAL 2

typedef enum OrthmergeStatus {
  ORTHMERGE_STATUS_OK = 0,
  ORTHMERGE_STATUS_NULL_POINTER = 1,
  ORTHMERGE_STATUS_INVALID_ARGUMENT = 2,
  ORTHMERGE_STATUS_DIMENSION_MISMATCH = 3,
  ORTHMERGE_STATUS_CONSTRAINT_VIOLATION = 4,
  ORTHMERGE_STATUS_INVALID_RATE = 5,
  ORTHMERGE_STATUS_INVALID_ADAPTER = 6,
  ORTHMERGE_STATUS_FORMAT = 7,
  ORTHMERGE_STATUS_IO = 8,
  ORTHMERGE_STATUS_PANIC = 9,
} OrthmergeStatus;

/**
 * Ordered list of adapters. Opaque to C.
 */
typedef struct OrthmergeAdapterSet OrthmergeAdapterSet;

/**
 * Byte buffer owned by the library; release with [`orthmerge_buffer_free`].
 */
typedef struct OrthmergeBuffer {
  uint8_t *data;
  size_t len;
} OrthmergeBuffer;

/**
 * Merge configuration. `weights` and `rates` hold `count` entries, which
 * must equal the adapter count; a null `weights` means all ones and a null
 * `rates` all zeros. `base_weight` is null or a `d_out × d_in` matrix.
 */
typedef struct OrthmergeMergeParams {
  uint32_t strategy;
  const double *weights;
  const double *rates;
  size_t count;
  const float *base_weight;
  uint64_t seed;
  uint64_t layer_index;
  uint64_t sample_index;
} OrthmergeMergeParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *orthmerge_version(void);

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *orthmerge_last_error(void);

/**
 * Creates an empty adapter set.
 *
 * # Safety
 * `out` must be valid for writing one pointer.
 */
enum OrthmergeStatus orthmerge_adapter_set_new(struct OrthmergeAdapterSet **out);

/**
 * Appends an adapter `ΔW = scale · B·A` copied from `factor_a`
 * (`rank × d_in`) and `factor_b` (`d_out × rank`).
 *
 * # Safety
 * `set` must come from this library; `name` must be a NUL-terminated
 * string; the factor pointers must hold the stated number of floats.
 */
enum OrthmergeStatus orthmerge_adapter_set_push(struct OrthmergeAdapterSet *set,
                                                const char *name,
                                                const float *factor_a,
                                                size_t rank,
                                                size_t d_in,
                                                const float *factor_b,
                                                size_t d_out,
                                                float scale);

/**
 * Parses AdapterPack bytes (strict mode).
 *
 * # Safety
 * `bytes` must hold `len` bytes; `out` must be valid for writing one pointer.
 */
enum OrthmergeStatus orthmerge_adapter_set_load(const uint8_t *bytes,
                                                size_t len,
                                                struct OrthmergeAdapterSet **out);

/**
 * Reads and parses an AdapterPack file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writing
 * one pointer.
 */
enum OrthmergeStatus orthmerge_adapter_set_load_file(const char *path,
                                                     struct OrthmergeAdapterSet **out);

/**
 * Serializes the set as canonical AdapterPack bytes.
 *
 * # Safety
 * `set` must come from this library; `out` must be valid for writing.
 */
enum OrthmergeStatus orthmerge_adapter_set_save(const struct OrthmergeAdapterSet *set,
                                                struct OrthmergeBuffer *out);

/**
 * # Safety
 * `buffer` must come from [`orthmerge_adapter_set_save`] and not have been
 * freed already.
 */
void orthmerge_buffer_free(struct OrthmergeBuffer buffer);

/**
 * # Safety
 * `set` must be null or come from this library and not have been freed.
 */
void orthmerge_adapter_set_free(struct OrthmergeAdapterSet *set);

/**
 * Number of adapters; 0 for a null set.
 *
 * # Safety
 * `set` must be null or come from this library.
 */
size_t orthmerge_adapter_set_len(const struct OrthmergeAdapterSet *set);

/**
 * Dimensions of adapter `index`. Any of the output pointers may be null.
 *
 * # Safety
 * `set` must come from this library; non-null outputs must be writable.
 */
enum OrthmergeStatus orthmerge_adapter_set_info(const struct OrthmergeAdapterSet *set,
                                                size_t index,
                                                size_t *d_in,
                                                size_t *d_out,
                                                size_t *rank);

/**
 * Samples `count` masks of length `d_out` into `out_masks` (row-major,
 * `count × d_out` bytes of 0/1). Mask `j` draws from
 * `StreamKey(seed, layer_index, sample_index, j)`. `strategy` must be
 * dropout or orthogonal.
 *
 * # Safety
 * `rates` must hold `count` doubles; `out_masks` must hold
 * `count * d_out` bytes.
 */
enum OrthmergeStatus orthmerge_sample_masks(uint32_t strategy_code,
                                            const double *rates,
                                            size_t count,
                                            size_t d_out,
                                            uint64_t seed,
                                            uint64_t layer_index,
                                            uint64_t sample_index,
                                            uint8_t *out_masks);

/**
 * Checks a plan against the set without merging.
 *
 * # Safety
 * `set` and `params` must be valid; see [`OrthmergeMergeParams`].
 */
enum OrthmergeStatus orthmerge_validate_plan(const struct OrthmergeAdapterSet *set,
                                             const struct OrthmergeMergeParams *params);

/**
 * Merges for input `h` (`d_in` floats). Writes the merged output to `out`
 * (`out_len` must equal d_out) and, when `contributions` is non-null, the
 * per-adapter contributions `y_j` row-major into it
 * (`contributions_len` must equal count × d_out).
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum OrthmergeStatus orthmerge_merge(const struct OrthmergeAdapterSet *set,
                                     const struct OrthmergeMergeParams *params,
                                     const float *h,
                                     size_t d_in,
                                     float *out,
                                     size_t out_len,
                                     float *contributions,
                                     size_t contributions_len);

/**
 * Same merge as [`orthmerge_merge`], returned as the audit JSON document the
 * `orthmerge merge` command writes. Release with [`orthmerge_string_free`].
 *
 * # Safety
 * All pointers must be valid; `out_json` must be writable.
 */
enum OrthmergeStatus orthmerge_merge_audit_json(const struct OrthmergeAdapterSet *set,
                                                const struct OrthmergeMergeParams *params,
                                                const float *h,
                                                size_t d_in,
                                                char **out_json);

/**
 * # Safety
 * `s` must be null or come from [`orthmerge_merge_audit_json`].
 */
void orthmerge_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ORTHMERGE_H */
