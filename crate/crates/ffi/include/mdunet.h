#ifndef MDUNET_H
#define MDUNET_H

/* Generated by cbindgen from the mdunet-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code of every fallible call.
typedef enum MduStatus {
  MDU_STATUS_OK = 0,
  // A required pointer argument was NULL.
  MDU_STATUS_NULL_POINTER = 1,
  // An argument failed validation (lengths, encodings, ranges).
  MDU_STATUS_INVALID_ARGUMENT = 2,
  // Configuration rejected (schema or invariants).
  MDU_STATUS_CONFIG_ERROR = 3,
  // Data rejected (incompatible cases, bad masks).
  MDU_STATUS_DATA_ERROR = 4,
  // On-disk container malformed.
  MDU_STATUS_FORMAT_ERROR = 5,
  // Operating-system I/O failure.
  MDU_STATUS_IO_ERROR = 6,
  // Training diverged (not reachable through this surface today).
  MDU_STATUS_DIVERGED = 7,
  // Anything else, including caught panics.
  MDU_STATUS_INTERNAL_ERROR = 8,
} MduStatus;

// Opaque handle around a built network (f32 weights).
typedef struct MduNetwork MduNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error on this thread; empty string if none. The pointer stays valid
// until the next failing call on the same thread. Do not free it.
const char *mdu_last_error_message(void);

// Library version as a static string; do not free it.
const char *mdu_version(void);

// Frees a string returned through a `char**` out-parameter.
//
// # Safety
// `s` must be NULL or a pointer previously returned by this library.
void mdu_string_free(char *s);

// Builds a network from a JSON network config (same schema as the CLI's
// "network" section) and an initialization seed.
//
// # Safety
// `config_json` must be a valid NUL-terminated string; `out` must be a
// valid pointer.
enum MduStatus mdu_network_from_config_json(const char *config_json,
                                            uint64_t seed,
                                            struct MduNetwork **out);

// Loads a network (weights, running statistics, config) from a checkpoint.
//
// # Safety
// `path` must be a valid NUL-terminated string; `out` must be valid.
enum MduStatus mdu_network_load_checkpoint(const char *path, struct MduNetwork **out);

// Writes the network to a checkpoint file.
//
// # Safety
// `net` must come from a constructor of this library; `path` must be a
// valid NUL-terminated string.
enum MduStatus mdu_network_save_checkpoint(const struct MduNetwork *net, const char *path);

// Releases a network handle. NULL is a no-op.
//
// # Safety
// `net` must be NULL or a pointer from a constructor, freed exactly once.
void mdu_network_free(struct MduNetwork *net);

// Number of learnable scalar parameters.
//
// # Safety
// `net` and `out` must be valid pointers.
enum MduStatus mdu_network_parameter_count(const struct MduNetwork *net, size_t *out);

// Input geometry: number of modality streams and the slice size.
//
// # Safety
// All pointers must be valid.
enum MduStatus mdu_network_input_geometry(const struct MduNetwork *net,
                                          size_t *out_streams,
                                          size_t *out_height,
                                          size_t *out_width);

// Layer disposal table as aligned text; free with `mdu_string_free`.
//
// # Safety
// `net` and `out` must be valid pointers.
enum MduStatus mdu_network_shape_table_text(const struct MduNetwork *net, char **out);

// Runs inference on one multi-modal slice.
//
// `inputs` holds the modalities back to back, each `height × width`
// row-major floats in acquisition units (`input_len` = streams × H × W);
// every modality is min–max normalized internally, matching training.
// `out_foreground` receives `H × W` foreground probabilities
// (1 − P(background)).
//
// # Safety
// `net`, `inputs` and `out_foreground` must be valid for the documented
// lengths.
enum MduStatus mdu_network_predict_slice(struct MduNetwork *net,
                                         const float *inputs,
                                         size_t input_len,
                                         float *out_foreground,
                                         size_t out_len);

// Overlap and surface metrics between two binary masks of shape
// `depth × height × width` (bytes 0/1). `spacing` is 3 voxel extents in mm,
// or NULL for unit spacing. Undefined values (empty masks) come back as
// NaN.
//
// # Safety
// Mask pointers must be valid for `depth × height × width` bytes; `spacing`
// NULL or valid for 3 doubles; out pointers valid.
enum MduStatus mdu_mask_metrics(const uint8_t *reference,
                                const uint8_t *predicted,
                                size_t depth,
                                size_t height,
                                size_t width,
                                const double *spacing,
                                double *out_dsc,
                                double *out_mhd,
                                double *out_vs);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MDUNET_H */
