#ifndef BISPIK_H
#define BISPIK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BispikStatus {
  BISPIK_STATUS_OK = 0,
  BISPIK_STATUS_NULL_POINTER = 1,
  BISPIK_STATUS_INVALID_ARGUMENT = 2,
  BISPIK_STATUS_IO = 3,
  BISPIK_STATUS_FORMAT = 4,
  BISPIK_STATUS_DIMENSION = 5,
  BISPIK_STATUS_CONFIG = 6,
  BISPIK_STATUS_EVALUATION = 7,
  BISPIK_STATUS_INTERNAL = 8,
  BISPIK_STATUS_BUFFER_TOO_SMALL = 9,
  BISPIK_STATUS_PANIC = 10,
} BispikStatus;

typedef enum BispikKind {
  BISPIK_KIND_SPIKING = 0,
  BISPIK_KIND_DENSE = 1,
} BispikKind;

/**
 * Opaque model handle.
 */
typedef struct BispikModel BispikModel;

/**
 * Energy summary for one sequence.
 */
typedef struct BispikEnergy {
  double ann_energy_mj;
  double snn_energy_mj;
  uint64_t total_flops;
  uint64_t total_sops;
  /**
   * Mean block-input firing rate over layers.
   */
  double mean_firing_rate;
} BispikEnergy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread; empty after a successful call. The
 * pointer stays valid until the next `bispik_*` call on the same thread.
 */
const char *bispik_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bispik_version(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum BispikStatus bispik_model_load(const char *path, struct BispikModel **out);

/**
 * Creates a freshly initialised model. `config` is optional config-file
 * text whose `[model]` section sets the architecture.
 *
 * # Safety
 * `config` must be null or NUL-terminated; `out` writable.
 */
enum BispikStatus bispik_model_init(enum BispikKind kind,
                                    const char *config,
                                    uint64_t seed,
                                    struct BispikModel **out);

/**
 * Writes the model (without optimizer state) to a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle and `path` NUL-terminated.
 */
enum BispikStatus bispik_model_save(const struct BispikModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void bispik_model_free(struct BispikModel *model);

/**
 * Vocabulary size, maximum sequence length and allocated parameter count.
 *
 * # Safety
 * `model` must be a live handle; output pointers may be null.
 */
enum BispikStatus bispik_model_info(const struct BispikModel *model,
                                    size_t *vocab_size,
                                    size_t *max_seq_len,
                                    size_t *n_params);

/**
 * Next-token logits for every position, row-major `[n_tokens, vocab]`.
 *
 * # Safety
 * `tokens` must hold `n_tokens` ids and `logits` room for `logits_len` values.
 */
enum BispikStatus bispik_model_forward(const struct BispikModel *model,
                                       const uint32_t *tokens,
                                       size_t n_tokens,
                                       double *logits,
                                       size_t logits_len);

/**
 * Continues `prompt` by `n_new` tokens (greedy when `temperature` is 0)
 * and writes the full sequence to `out_tokens`.
 *
 * # Safety
 * `prompt` must hold `n_prompt` ids, `out_tokens` room for `out_cap`
 * values, and `out_len` be writable.
 */
enum BispikStatus bispik_generate(const struct BispikModel *model,
                                  const uint32_t *prompt,
                                  size_t n_prompt,
                                  size_t n_new,
                                  double temperature,
                                  uint64_t seed,
                                  uint32_t *out_tokens,
                                  size_t out_cap,
                                  size_t *out_len);

/**
 * Energy estimate for one forward pass of a spiking model over `tokens`.
 * Non-positive constants select the defaults.
 *
 * # Safety
 * `tokens` must hold `n_tokens` ids and `out` be writable.
 */
enum BispikStatus bispik_energy(const struct BispikModel *model,
                                const uint32_t *tokens,
                                size_t n_tokens,
                                double e_mac,
                                double e_ac,
                                struct BispikEnergy *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BISPIK_H */
