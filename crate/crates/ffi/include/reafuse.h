#ifndef REAFUSE_H
#define REAFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ReafuseStatus {
  REAFUSE_STATUS_OK = 0,
  REAFUSE_STATUS_NULL_POINTER = 1,
  REAFUSE_STATUS_INVALID_ARGUMENT = 2,
  // Extents, ranks or orientation counts do not fit together.
  REAFUSE_STATUS_SHAPE = 3,
  REAFUSE_STATUS_NON_FINITE = 4,
  REAFUSE_STATUS_IO = 5,
  // Malformed tensor container or manifest.
  REAFUSE_STATUS_FORMAT = 6,
  REAFUSE_STATUS_CONFIG = 7,
  REAFUSE_STATUS_BUFFER_TOO_SMALL = 8,
  REAFUSE_STATUS_PANIC = 9,
} ReafuseStatus;

// Backbone, neck and fusion head of one pyramid variant.
typedef struct ReafusePyramid ReafusePyramid;

// Rotation-equivariant channel attention with fixed parameters.
typedef struct ReafuseReca ReafuseReca;

// Dense row-major `f64` tensor.
typedef struct ReafuseTensor ReafuseTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// NUL-terminated version string of the library; static storage.
const char *reafuse_version(void);

// Message of the last failed call on this thread, empty if none. Valid
// until the next failing call on the same thread.
const char *reafuse_last_error(void);

// Creates a tensor of the given shape. `data` holds the product of the
// extents in row-major order, or is null for zeros. Non-finite values are
// rejected.
//
// # Safety
// `shape` must point to `rank` values; `data`, when non-null, to as many
// doubles as the shape has elements.
enum ReafuseStatus reafuse_tensor_new(const size_t *shape,
                                      size_t rank,
                                      const double *data,
                                      struct ReafuseTensor **out);

// # Safety
// `t` must be null or a handle from this library not yet freed.
void reafuse_tensor_free(struct ReafuseTensor *t);

// Rank of `t`, 0 for a null handle.
//
// # Safety
// `t` must be null or a live tensor handle.
size_t reafuse_tensor_rank(const struct ReafuseTensor *t);

// Element count of `t`, 0 for a null handle.
//
// # Safety
// `t` must be null or a live tensor handle.
size_t reafuse_tensor_len(const struct ReafuseTensor *t);

// Copies the extents into `out`, which holds `cap` values.
//
// # Safety
// `t` must be a live tensor handle and `out` valid for `cap` writes.
enum ReafuseStatus reafuse_tensor_shape(const struct ReafuseTensor *t, size_t *out, size_t cap);

// Copies the row-major values into `out`, which holds `cap` doubles.
//
// # Safety
// `t` must be a live tensor handle and `out` valid for `cap` writes.
enum ReafuseStatus reafuse_tensor_copy_data(const struct ReafuseTensor *t, double *out, size_t cap);

// Reads a `RAFT` tensor file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ReafuseStatus reafuse_tensor_read(const char *path, struct ReafuseTensor **out);

// Writes `t` as a `RAFT` tensor file.
//
// # Safety
// `t` must be a live tensor handle and `path` a NUL-terminated string.
enum ReafuseStatus reafuse_tensor_write(const struct ReafuseTensor *t, const char *path);

// Rotates the last two axes counter-clockwise by `quarter_turns`.
//
// # Safety
// `x` must be a live tensor handle and `out` a valid pointer.
enum ReafuseStatus reafuse_rot90(const struct ReafuseTensor *x,
                                 int64_t quarter_turns,
                                 struct ReafuseTensor **out);

// Acts with the group element `s` of C_N on a `[B, K·N, H, W]` tensor:
// spatial rotation plus cyclic shift of the orientation channels.
//
// # Safety
// `x` must be a live tensor handle and `out` a valid pointer.
enum ReafuseStatus reafuse_g_act(const struct ReafuseTensor *x,
                                 size_t orientations,
                                 size_t s,
                                 struct ReafuseTensor **out);

// `‖got − reference‖_F / ‖reference‖_F`, or the plain norm of the
// difference when the reference is zero.
//
// # Safety
// Both tensors must be live handles and `out` a valid pointer.
enum ReafuseStatus reafuse_relative_residual(const struct ReafuseTensor *got,
                                             const struct ReafuseTensor *reference,
                                             double *out);

// ReCA over `channels = K·N` channels with reduction `r`, randomly
// initialized from `seed`.
//
// # Safety
// `out` must be a valid pointer.
enum ReafuseStatus reafuse_reca_new(size_t channels,
                                    size_t orientations,
                                    size_t reduction,
                                    uint64_t seed,
                                    struct ReafuseReca **out);

// Applies ReCA to a `[B, K·N, H, W]` tensor.
//
// # Safety
// `reca` and `x` must be live handles and `out` a valid pointer.
enum ReafuseStatus reafuse_reca_forward(const struct ReafuseReca *reca,
                                        const struct ReafuseTensor *x,
                                        struct ReafuseTensor **out);

// # Safety
// `reca` must be null or a handle from this library not yet freed.
void reafuse_reca_free(struct ReafuseReca *reca);

// Builds a pyramid from a JSON pyramid configuration (the `pyramid`
// object of a harness config); parameters are drawn from its seed.
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` a valid pointer.
enum ReafuseStatus reafuse_pyramid_new(const char *config_json, struct ReafusePyramid **out);

// Loads a pyramid saved to `dir` (manifest plus `RAFT` files).
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum ReafuseStatus reafuse_pyramid_load(const char *dir, struct ReafusePyramid **out);

// Saves the pyramid parameters to `dir`.
//
// # Safety
// `pyramid` must be a live handle and `dir` a NUL-terminated string.
enum ReafuseStatus reafuse_pyramid_save(const struct ReafusePyramid *pyramid, const char *dir);

// Number of pyramid levels, 0 for a null handle.
//
// # Safety
// `pyramid` must be null or a live handle.
size_t reafuse_pyramid_levels(const struct ReafusePyramid *pyramid);

// Runs the pyramid on a `[B, C_in, H, W]` image and stores one new tensor
// handle per level, finest first, in `out` (room for `cap` handles).
//
// # Safety
// `pyramid` and `image` must be live handles and `out` valid for `cap`
// writes.
enum ReafuseStatus reafuse_pyramid_forward(const struct ReafusePyramid *pyramid,
                                           const struct ReafuseTensor *image,
                                           struct ReafuseTensor **out,
                                           size_t cap);

// # Safety
// `pyramid` must be null or a handle from this library not yet freed.
void reafuse_pyramid_free(struct ReafusePyramid *pyramid);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REAFUSE_H */
