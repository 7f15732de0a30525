#ifndef ACIS_H
#define ACIS_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  ACIS_STATUS_OK = 0,
  ACIS_STATUS_NULL_POINTER = 1,
  ACIS_STATUS_INVALID_ARGUMENT = 2,
  ACIS_STATUS_IO = 3,
  ACIS_STATUS_CONFIG = 4,
  ACIS_STATUS_CHECKPOINT = 5,
  ACIS_STATUS_SCENE = 6,
  ACIS_STATUS_DIVERGED = 7,
  ACIS_STATUS_BUFFER_TOO_SMALL = 8,
  ACIS_STATUS_PANIC = 9,
} AcisStatus;

/**
 * Actor network: encoder, recurrent core, latent heads and decoder.
 */
typedef struct AcisActor AcisActor;

/**
 * Run configuration.
 */
typedef struct AcisConfig AcisConfig;

/**
 * A generated scene with its precomputed auxiliary channels.
 */
typedef struct AcisScene AcisScene;

/**
 * Library version as a static NUL-terminated string.
 */
const char *acis_version(void);

/**
 * Message of the last failed call on this thread, or an empty string.
 * Valid until the next call into the library on the same thread.
 */
const char *acis_last_error_message(void);

/**
 * Creates a configuration holding the defaults.
 */
AcisStatus acis_config_new(AcisConfig **out);

/**
 * Loads an INI configuration file.
 */
AcisStatus acis_config_load(const char *path, AcisConfig **out);

/**
 * Sets one key from its textual value, then validates the whole
 * configuration; on failure the configuration is left unchanged.
 */
AcisStatus acis_config_set(AcisConfig *cfg, const char *key, const char *value);

/**
 * Copies the textual value of `key` into `buf` (NUL-terminated).
 * `out_len` receives the value length without the terminator; when `len`
 * is too small nothing is copied and `ACIS_STATUS_BUFFER_TOO_SMALL` is
 * returned. `buf` may be null when `len` is 0.
 */
AcisStatus acis_config_get(const AcisConfig *cfg,
                           const char *key,
                           char *buf,
                           size_t len,
                           size_t *out_len);

void acis_config_free(AcisConfig *cfg);

/**
 * Freshly initialised actor with the architecture of `cfg`.
 */
AcisStatus acis_actor_new(const AcisConfig *cfg, uint64_t seed, AcisActor **out);

/**
 * Loads an actor checkpoint.
 */
AcisStatus acis_actor_load(const char *path, AcisActor **out);

AcisStatus acis_actor_save(const AcisActor *actor, const char *path);

/**
 * Image size the actor expects.
 */
AcisStatus acis_actor_size(const AcisActor *actor, size_t *height, size_t *width);

void acis_actor_free(AcisActor *actor);

/**
 * Generates the scene that `seed` yields under the scene keys of `cfg`.
 */
AcisStatus acis_scene_generate(const AcisConfig *cfg, uint64_t seed, AcisScene **out);

/**
 * Height, width and instance count of a scene.
 */
AcisStatus acis_scene_size(const AcisScene *scene,
                           size_t *height,
                           size_t *width,
                           size_t *instances);

/**
 * Copies the row-major grayscale image into `buf` of `len` doubles.
 */
AcisStatus acis_scene_image(const AcisScene *scene, double *buf, size_t len);

/**
 * Copies ground-truth mask `index` into `buf` as 0/1 bytes, row-major.
 */
AcisStatus acis_scene_mask(const AcisScene *scene, size_t index, uint8_t *buf, size_t len);

void acis_scene_free(AcisScene *scene);

/**
 * Segments `scene` with mean actions and the learned stop signal, for at
 * most `max_steps` steps. Writes up to `capacity` masks of `H·W` bytes
 * into `masks`; `out_count` receives the number of predicted instances.
 * If more were predicted than fit, nothing is written and
 * `ACIS_STATUS_BUFFER_TOO_SMALL` is returned.
 */
AcisStatus acis_segment(const AcisActor *actor,
                        const AcisScene *scene,
                        size_t max_steps,
                        uint8_t *masks,
                        size_t capacity,
                        size_t *out_count);

/**
 * Symmetric best Dice between two sets of `H·W` byte masks.
 */
AcisStatus acis_sbd(const uint8_t *preds,
                    size_t n_preds,
                    const uint8_t *gts,
                    size_t n_gts,
                    size_t height,
                    size_t width,
                    double *out);

/**
 * Runs the command-line front end with `argv[0..argc]` and returns its
 * exit code (0 success, 1 usage or configuration error, 2 training abort).
 */
int acis_cli_main(int argc, const char *const *argv);

#endif  /* ACIS_H */
