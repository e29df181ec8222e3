/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef CORM_H
#define CORM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Importance threshold `score >= 1/t` with `t` the absolute step.
#define CORM_THRESHOLD_STEP 0

// Importance threshold `score >= 1/n` with `n` the cache size.
#define CORM_THRESHOLD_CACHE 1

// Result of every fallible call.
typedef enum CormStatus {
  CORM_STATUS_OK = 0,
  CORM_STATUS_NULL_POINTER = 1,
  CORM_STATUS_INVALID_ARGUMENT = 2,
  CORM_STATUS_INVALID_POLICY = 3,
  CORM_STATUS_INVALID_CONFIG = 4,
  CORM_STATUS_TOKEN_OUT_OF_RANGE = 5,
  CORM_STATUS_BUFFER_TOO_SMALL = 6,
  CORM_STATUS_TRACE_CHECKSUM = 7,
  CORM_STATUS_TRACE_FORMAT = 8,
  CORM_STATUS_TRACE_TOO_LARGE = 9,
  CORM_STATUS_IO = 10,
  CORM_STATUS_PANIC = 11,
} CormStatus;

typedef struct CormDecoder CormDecoder;

typedef struct CormModel CormModel;

typedef struct CormTrace CormTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *corm_last_error_message(void);

// Static name of a status code, e.g. `"trace_checksum"`; `"unknown"` for
// values outside the enum.
const char *corm_status_name(int32_t status);

// Checks a policy string without building anything.
//
// # Safety
// `policy` must be null or a NUL-terminated string.
enum CormStatus corm_policy_validate(const char *policy);

// The 2-layer, 4-head, d_model 64, vocabulary 256 toy model.
//
// # Safety
// `out` must be null or point to writable storage for a handle.
enum CormStatus corm_model_new_toy(uint64_t seed, struct CormModel **out);

// Builds a model from config-file text, with randomly initialized weights.
//
// # Safety
// `config_toml` must be null or NUL-terminated; `out` as in `corm_model_new_toy`.
enum CormStatus corm_model_from_config(const char *config_toml, struct CormModel **out);

// Loads a model config file and, if `weights_path` is non-null, its weights.
//
// # Safety
// Paths must be null or NUL-terminated; `out` as in `corm_model_new_toy`.
enum CormStatus corm_model_load(const char *config_path,
                                const char *weights_path,
                                struct CormModel **out);

// Writes the model's weights in the documented binary format.
//
// # Safety
// `model` must be a live handle or null; `path` null or NUL-terminated.
enum CormStatus corm_model_save_weights(const struct CormModel *model, const char *path);

// Vocabulary size, or 0 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
size_t corm_model_vocab_size(const struct CormModel *model);

// Number of layers, or 0 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
size_t corm_model_n_layers(const struct CormModel *model);

// Number of KV heads per layer, or 0 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
size_t corm_model_n_kv_heads(const struct CormModel *model);

// # Safety
// `model` must be null or a handle not yet freed. Decoders created from it
// stay valid.
void corm_model_free(struct CormModel *model);

// A fresh decoding state for one sequence under `policy`.
//
// # Safety
// `model` must be a live handle or null; `policy` null or NUL-terminated;
// `out` as in `corm_model_new_toy`.
enum CormStatus corm_decoder_new(const struct CormModel *model,
                                 const char *policy,
                                 uint32_t threshold_mode,
                                 struct CormDecoder **out);

// Feeds one token and writes the next-token logits to `logits`, which must
// hold at least the vocabulary size. Eviction runs before returning.
//
// # Safety
// `decoder` must be a live handle or null; `logits` must point to
// `logits_len` writable doubles.
enum CormStatus corm_decoder_step(struct CormDecoder *decoder,
                                  uint32_t token,
                                  double *logits,
                                  size_t logits_len);

// Tokens processed so far, or 0 for a null handle.
//
// # Safety
// `decoder` must be a live handle or null.
size_t corm_decoder_step_count(const struct CormDecoder *decoder);

// Entries currently held by one KV cache.
//
// # Safety
// `decoder` must be a live handle or null; `out` null or writable.
enum CormStatus corm_decoder_cache_size(const struct CormDecoder *decoder,
                                        size_t layer,
                                        size_t kv_head,
                                        size_t *out);

// Surviving 1-based positions of one KV cache, ascending. `out_len`
// receives the count; if `capacity` is too small the call fails with
// `CORM_STATUS_BUFFER_TOO_SMALL` and writes nothing else.
//
// # Safety
// `decoder` must be a live handle or null; `positions` must point to
// `capacity` writable values; `out_len` null or writable.
enum CormStatus corm_decoder_kept_positions(const struct CormDecoder *decoder,
                                            size_t layer,
                                            size_t kv_head,
                                            uint32_t *positions,
                                            size_t capacity,
                                            size_t *out_len);

// Mean over caches of `1 - size / t`; 0 before the first step.
//
// # Safety
// `decoder` must be a live handle or null; `out` null or writable.
enum CormStatus corm_decoder_compression_rate(const struct CormDecoder *decoder, double *out);

// # Safety
// `decoder` must be null or a handle not yet freed.
void corm_decoder_free(struct CormDecoder *decoder);

// Teacher-forced perplexity of `tokens` with eviction active.
//
// # Safety
// `model` must be a live handle or null; `tokens` must point to `n_tokens`
// values; `policy` null or NUL-terminated; `out` null or writable.
enum CormStatus corm_perplexity(const struct CormModel *model,
                                const uint32_t *tokens,
                                size_t n_tokens,
                                const char *policy,
                                uint32_t threshold_mode,
                                double *out);

// Records a full-cache trace; fails with `CORM_STATUS_TRACE_TOO_LARGE` if
// the serialized trace would exceed `max_bytes`.
//
// # Safety
// `model` must be a live handle or null; `tokens` must point to `n_tokens`
// values; `out` as in `corm_model_new_toy`.
enum CormStatus corm_trace_record(const struct CormModel *model,
                                  const uint32_t *tokens,
                                  size_t n_tokens,
                                  uint64_t max_bytes,
                                  struct CormTrace **out);

// # Safety
// `trace` must be a live handle or null; `path` null or NUL-terminated.
enum CormStatus corm_trace_save(const struct CormTrace *trace, const char *path);

// Loads and verifies a trace file.
//
// # Safety
// `path` must be null or NUL-terminated; `out` as in `corm_model_new_toy`.
enum CormStatus corm_trace_load(const char *path, struct CormTrace **out);

// Number of recorded steps, or 0 for a null handle.
//
// # Safety
// `trace` must be a live handle or null.
size_t corm_trace_len(const struct CormTrace *trace);

// Replays `policy` over the trace and writes the compression rate after
// each step into `rates`, which must hold at least `corm_trace_len` values.
//
// # Safety
// `trace` must be a live handle or null; `policy` null or NUL-terminated;
// `rates` must point to `rates_len` writable doubles.
enum CormStatus corm_trace_replay(const struct CormTrace *trace,
                                  const char *policy,
                                  uint32_t threshold_mode,
                                  double *rates,
                                  size_t rates_len);

// # Safety
// `trace` must be null or a handle not yet freed.
void corm_trace_free(struct CormTrace *trace);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CORM_H */
