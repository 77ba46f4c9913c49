#ifndef MATFUSE_H
#define MATFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_ARGUMENT = 1,
  MF_STATUS_INVALID_ARGUMENT = 2,
  MF_STATUS_CONFIG = 3,
  MF_STATUS_MASK = 4,
  MF_STATUS_IMAGE = 5,
  MF_STATUS_BACKEND_LOAD = 6,
  MF_STATUS_BACKEND = 7,
  MF_STATUS_NON_FINITE = 8,
  MF_STATUS_CANCELLED = 9,
  MF_STATUS_IO = 10,
  MF_STATUS_PANIC = 11,
} MfStatus;

// A loaded denoising backend.
typedef struct MfBackend MfBackend;

// Transfer configuration.
typedef struct MfConfig MfConfig;

// An RGB8 image, rows top to bottom, pixels interleaved.
typedef struct MfImage MfImage;

// Called after every sampling step with the 1-based step and the total.
// Returning nonzero cancels the transfer with `MF_STATUS_CANCELLED`.
typedef int32_t (*MfProgressFn)(void *user_data, uint32_t step, uint32_t total);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *mf_version(void);

// Message of the last failed call on this thread, or NULL. Valid until
// the next call into the library on the same thread.
const char *mf_last_error_message(void);

// # Safety
// `s` must be NULL or a string returned by this library.
void mf_string_free(char *s);

// # Safety
// `out` must be a valid pointer.
enum MfStatus mf_config_new_default(struct MfConfig **out);

// Parses a full or partial configuration; missing keys take defaults.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum MfStatus mf_config_from_json(const char *json, struct MfConfig **out);

// Sets one numeric field by name (e.g. `"w"`, `"T"`, `"lam"`).
// The configuration is left unchanged when the result would be invalid.
//
// # Safety
// `config` must be a live handle and `key` a NUL-terminated string.
enum MfStatus mf_config_set(struct MfConfig *config, const char *key, double value);

// # Safety
// `config` must be a live handle and `out` a valid pointer.
enum MfStatus mf_config_to_json(const struct MfConfig *config, char **out);

// # Safety
// `config` must be NULL or a handle not yet freed.
void mf_config_free(struct MfConfig *config);

// Deterministic analytic backend for images of `height x width` pixels
// (multiples of 8).
//
// # Safety
// `out` must be a valid pointer.
enum MfStatus mf_backend_new_toy(uint64_t seed, uint32_t height, uint32_t width, struct MfBackend **out);

// Pretrained backend from a weights directory; NULL reads
// `$MATFUSE_WEIGHTS_DIR`.
//
// # Safety
// `weights_dir` must be NULL or a NUL-terminated string, `out` a valid
// pointer.
enum MfStatus mf_backend_new_pretrained(const char *weights_dir, struct MfBackend **out);

// Backend description as JSON, including the accepted image size.
//
// # Safety
// `backend` must be a live handle and `out` a valid pointer.
enum MfStatus mf_backend_manifest_json(const struct MfBackend *backend, char **out);

// # Safety
// `backend` must be NULL or a handle not yet freed.
void mf_backend_free(struct MfBackend *backend);

// Transfers the material of `material` onto the masked object of
// `image`. Images are RGB8 (`width * height * 3` bytes); the mask has one
// byte per image pixel, values >= 128 marking the object.
//
// # Safety
// Buffers must be at least as long as their dimensions imply; strings
// NUL-terminated; handles live; `progress` (if set) callable with
// `user_data`; `out` a valid pointer.
enum MfStatus mf_transfer(const struct MfBackend *backend, const struct MfConfig *config, const uint8_t *image, uint32_t width, uint32_t height, const uint8_t *mask, const uint8_t *material, uint32_t material_width, uint32_t material_height, const char *source_prompt, const char *target_prompt, MfProgressFn progress, void *user_data, struct MfImage **out);

// File-based [`mf_transfer`]: reads PNG/JPEG inputs and writes a PNG.
//
// # Safety
// Strings must be NUL-terminated and handles live.
enum MfStatus mf_transfer_files(const struct MfBackend *backend, const struct MfConfig *config, const char *image_path, const char *mask_path, const char *material_path, const char *source_prompt, const char *target_prompt, const char *out_path);

// # Safety
// `image` must be a live handle.
uint32_t mf_image_width(const struct MfImage *image);

// # Safety
// `image` must be a live handle.
uint32_t mf_image_height(const struct MfImage *image);

// Pixel bytes (`width * height * 3`), owned by the image.
//
// # Safety
// `image` must be a live handle.
const uint8_t *mf_image_data(const struct MfImage *image);

// # Safety
// `image` must be NULL or a handle not yet freed.
void mf_image_free(struct MfImage *image);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MATFUSE_H */
