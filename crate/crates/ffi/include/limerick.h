#ifndef LIMERICK_H
#define LIMERICK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LimStatus {
  LIM_STATUS_OK = 0,
  LIM_STATUS_NULL_ARGUMENT = 1,
  LIM_STATUS_INVALID_UTF8 = 2,
  /**
   * A resource or model file could not be read or parsed.
   */
  LIM_STATUS_RESOURCE = 3,
  /**
   * Bad prompt, mode or search parameters.
   */
  LIM_STATUS_INVALID_REQUEST = 4,
  /**
   * The search finished without a poem.
   */
  LIM_STATUS_GENERATION_FAILED = 5,
  /**
   * The language model backend failed.
   */
  LIM_STATUS_LANGUAGE_MODEL = 6,
  /**
   * The poem failed validation (not an error in the call itself).
   */
  LIM_STATUS_VALIDATION_FAILED = 7,
  LIM_STATUS_INTERNAL = 99,
} LimStatus;

/**
 * Opaque engine handle.
 */
typedef struct LimEngine LimEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads the resources under `resource_dir` and a language model.
 * `lm_spec` is `ngram:<path>` or `remote:<url>`; null means `lm.json` in
 * the resource directory.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum LimStatus lim_engine_open(const char *resource_dir,
                               const char *lm_spec,
                               struct LimEngine **out);

/**
 * # Safety
 * `engine` must come from [`lim_engine_open`] and not be used afterwards.
 */
void lim_engine_free(struct LimEngine *engine);

/**
 * Generates poems for `prompt` and writes a JSON array of poem records,
 * best first, to `out_json`. `mode` may be null for the full system.
 *
 * # Safety
 * `engine` must be a live handle; strings must be NUL-terminated;
 * `out_json` must be writable.
 */
enum LimStatus lim_generate(const struct LimEngine *engine,
                            const char *prompt,
                            const char *mode,
                            size_t beam,
                            size_t per_template,
                            uint64_t seed,
                            char **out_json);

/**
 * Validates one JSON poem record and writes the report as JSON. Returns
 * `ValidationFailed` when the poem breaks a hard constraint.
 *
 * # Safety
 * As for [`lim_generate`].
 */
enum LimStatus lim_validate(const struct LimEngine *engine,
                            const char *record_json,
                            char **out_json);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void lim_string_free(char *s);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into this library from the same thread.
 */
const char *lim_last_error(void);

/**
 * Library version as a static string.
 */
const char *lim_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIMERICK_H */
