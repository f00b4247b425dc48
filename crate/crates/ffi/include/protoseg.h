#ifndef PROTOSEG_H
#define PROTOSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum PsStatus {
  PS_STATUS_OK = 0,
  // A required pointer argument was null.
  PS_STATUS_NULL_ARGUMENT = 1,
  // Invalid arguments or configuration.
  PS_STATUS_USAGE = 2,
  // Unreadable, malformed or inconsistent data.
  PS_STATUS_DATA = 3,
  // A computation produced non-finite values.
  PS_STATUS_NUMERIC = 4,
  // An internal invariant failed.
  PS_STATUS_PANIC = 5,
} PsStatus;

// A label volume.
typedef struct PsMask PsMask;

// A trained model: parameters, prototype registry and run settings.
typedef struct PsModel PsModel;

// An intensity volume in `[0, 1]`.
typedef struct PsVolume PsVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *ps_last_error(void);

// Library version as a static string.
const char *ps_version(void);

// Loads an FSPM checkpoint.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum PsStatus ps_model_load(const char *path, struct PsModel **out);

// # Safety
// `model` must come from [`ps_model_load`] and not be used afterwards.
void ps_model_free(struct PsModel *model);

// Slice extents the model expects.
//
// # Safety
// `model` must be a live handle; `height` and `width` valid pointers.
enum PsStatus ps_model_input_size(const struct PsModel *model, uintptr_t *height, uintptr_t *width);

// Reads an FSV1 image file.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum PsStatus ps_volume_read(const char *path, struct PsVolume **out);

// Copies `depth * height * width` intensities (z-major, then rows) into a
// new volume.
//
// # Safety
// `data` must point to that many floats and `out` be a valid pointer.
enum PsStatus ps_volume_new(uintptr_t depth,
                            uintptr_t height,
                            uintptr_t width,
                            const float *data,
                            struct PsVolume **out);

// # Safety
// `volume` must be a live handle and `dims` point to three `usize`.
enum PsStatus ps_volume_dims(const struct PsVolume *volume, uintptr_t *dims);

// # Safety
// `volume` must come from this library and not be used afterwards.
void ps_volume_free(struct PsVolume *volume);

// Reads an FSV1 mask file (full or box).
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum PsStatus ps_mask_read(const char *path, struct PsMask **out);

// Copies `depth * height * width` labels into a new full mask.
//
// # Safety
// `labels` must point to that many bytes and `out` be a valid pointer.
enum PsStatus ps_mask_new(uintptr_t depth,
                          uintptr_t height,
                          uintptr_t width,
                          const uint8_t *labels,
                          struct PsMask **out);

// # Safety
// `mask` must be a live handle and `dims` point to three `usize`.
enum PsStatus ps_mask_dims(const struct PsMask *mask, uintptr_t *dims);

// Borrowed view of the labels; valid while `mask` lives. `len` receives the
// voxel count.
//
// # Safety
// `mask` must be a live handle; `data` and `len` valid pointers.
enum PsStatus ps_mask_labels(const struct PsMask *mask, const uint8_t **data, uintptr_t *len);

// Writes `mask` as an FSV1 file.
//
// # Safety
// `mask` must be a live handle and `path` a nul-terminated string.
enum PsStatus ps_mask_write(const struct PsMask *mask, const char *path);

// # Safety
// `mask` must come from this library and not be used afterwards.
void ps_mask_free(struct PsMask *mask);

// Segments `query` using the annotated support volume, with the support
// composition the model was trained with.
//
// # Safety
// All handles must be live and `out` a valid pointer.
enum PsStatus ps_predict(const struct PsModel *model,
                         const struct PsVolume *support_image,
                         const struct PsMask *support_mask,
                         const struct PsVolume *query,
                         float threshold,
                         struct PsMask **out);

// Volumetric dice of two masks of equal extents.
//
// # Safety
// Both handles must be live and `out` a valid pointer.
enum PsStatus ps_dice(const struct PsMask *a, const struct PsMask *b, double *out);

// `full_shot / (support_full + support_weak / weak_factor)`.
//
// # Safety
// `out` must be a valid pointer.
enum PsStatus ps_annotation_cost_ratio(uint64_t full_shot,
                                       uint64_t support_full,
                                       uint64_t support_weak,
                                       double weak_factor,
                                       double *out);

// Writes a synthetic dataset (FSV1 files plus manifest) into `out_dir`.
//
// # Safety
// `out_dir` must be a nul-terminated string.
enum PsStatus ps_generate_phantoms(const char *out_dir,
                                   uint8_t classes,
                                   uint32_t patients,
                                   uintptr_t size,
                                   uintptr_t depth,
                                   uint64_t seed,
                                   double noise_sigma);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTOSEG_H */
