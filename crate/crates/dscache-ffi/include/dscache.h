/* C interface for the dscache streaming KV-cache engine.
* Generated by cbindgen from crates/dscache-ffi; do not edit. */

#ifndef DSCACHE_H
#define DSCACHE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>
typedef struct DscEngine DscEngine;

/**
 * Result code of every FFI call.
 */
typedef enum DscStatus {
  /**
   * The call succeeded.
   */
  DscStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  DscStatus_NullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  DscStatus_InvalidUtf8 = 2,
  /**
   * The configuration JSON did not parse.
   */
  DscStatus_Parse = 3,
  /**
   * The configuration parsed but is contradictory.
   */
  DscStatus_Config = 4,
  /**
   * Structurally valid input violated an operation's contract.
   */
  DscStatus_Contract = 5,
  /**
   * A rotary position exceeded the configured bound.
   */
  DscStatus_PositionOverflow = 6,
  /**
   * An I/O error surfaced from the engine.
   */
  DscStatus_Io = 7,
  /**
   * An output buffer was too small; the size hint tells how much is needed.
   */
  DscStatus_BufferTooSmall = 8,
  /**
   * The engine panicked internally; the handle is still safe to free.
   */
  DscStatus_Panic = 9,
} DscStatus;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds an engine from a JSON document `{"model": {...}, "policy": {...}}`
 * (the scenario-file dialect) and stores the handle in `*out_engine`.
 *
 * # Safety
 * `config_json` must be a valid nul-terminated string and `out_engine` a
 * valid pointer; the returned handle must be released with
 * [`dsc_engine_free`].
 */
enum DscStatus dsc_engine_new(const char *config_json, DscEngine **out_engine);

/**
 * Releases an engine handle. Passing null is a no-op.
 *
 * # Safety
 * `engine` must be null or a handle from [`dsc_engine_new`] that has not
 * been freed yet.
 */
void dsc_engine_free(DscEngine *engine);

/**
 * Returns the model's hidden width (embedding row length), or 0 for null.
 *
 * # Safety
 * `engine` must be null or a live handle from [`dsc_engine_new`].
 */
size_t dsc_engine_hidden(const DscEngine *engine);

/**
 * Ingests one frame of `tokens` embedding rows, each `dsc_engine_hidden`
 * doubles long, laid out row-major in `embeddings`.
 *
 * # Safety
 * `engine` must be a live handle and `embeddings` must point at
 * `tokens * dsc_engine_hidden(engine)` doubles.
 */
enum DscStatus dsc_engine_push_frame(DscEngine *engine, const double *embeddings, size_t tokens);

/**
 * Answers a text query of `n_tokens` token ids, greedily decoding up to
 * `max_new` tokens into `out_tokens`.
 *
 * `*out_written` always receives the full decoded length; when it exceeds
 * `out_capacity` nothing is written and the call returns `BufferTooSmall`.
 *
 * # Safety
 * `engine` must be a live handle, `tokens` must point at `n_tokens` ids,
 * `out_tokens` at `out_capacity` slots, and `out_written` must be valid.
 */
enum DscStatus dsc_engine_query(DscEngine *engine,
                                const uint32_t *tokens,
                                size_t n_tokens,
                                size_t max_new,
                                uint32_t *out_tokens,
                                size_t out_capacity,
                                size_t *out_written);

/**
 * Serializes run counters plus the last query's metrics to a JSON string
 * owned by the caller; release it with [`dsc_string_free`].
 *
 * # Safety
 * `engine` must be a live handle and `out_json` a valid pointer.
 */
enum DscStatus dsc_engine_metrics_json(const DscEngine *engine, char **out_json);

/**
 * Releases a string returned by this library. Passing null is a no-op.
 *
 * # Safety
 * `s` must be null or a string returned by this library that has not been
 * freed yet.
 */
void dsc_string_free(char *s);

/**
 * Describes this thread's most recent failure. The pointer stays valid
 * until the next failing call on the same thread; the string is empty if
 * nothing failed yet.
 */
const char *dsc_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSCACHE_H */
