#ifndef ROBUST_MMR_H
#define ROBUST_MMR_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RmmrStatus {
  RMMR_STATUS_OK = 0,
  RMMR_STATUS_NULL_POINTER = 1,
  RMMR_STATUS_INVALID_ARGUMENT = 2,
  RMMR_STATUS_DATA_ERROR = 3,
  RMMR_STATUS_NON_FINITE = 4,
  RMMR_STATUS_BUFFER_TOO_SMALL = 5,
  RMMR_STATUS_UNSUPPORTED_VERSION = 6,
  RMMR_STATUS_INTEGRITY_ERROR = 7,
  RMMR_STATUS_IO_ERROR = 8,
  RMMR_STATUS_PANIC = 99,
} RmmrStatus;

/**
 * Trained model state.
 */
typedef struct RmmrCheckpoint RmmrCheckpoint;

/**
 * Run configuration.
 */
typedef struct RmmrConfig RmmrConfig;

/**
 * Loaded or generated corpus.
 */
typedef struct RmmrCorpus RmmrCorpus;

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length excluding the NUL.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t rmmr_last_error(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rmmr_version(void);

/**
 * Frees a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer returned by this library, freed once.
 */
void rmmr_string_free(char *s);

/**
 * # Safety
 * `out` must be a valid pointer to receive the handle.
 */
enum RmmrStatus rmmr_config_default(struct RmmrConfig **out);

/**
 * Parses a strict JSON run configuration.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` a valid pointer.
 */
enum RmmrStatus rmmr_config_from_json(const char *json, struct RmmrConfig **out);

/**
 * Serializes a configuration; free the result with [`rmmr_string_free`].
 *
 * # Safety
 * `cfg` must be a live handle; `out` a valid pointer.
 */
enum RmmrStatus rmmr_config_to_json(const struct RmmrConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum RmmrStatus rmmr_config_set_seed(struct RmmrConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum RmmrStatus rmmr_config_set_total_steps(struct RmmrConfig *cfg, size_t steps);

/**
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void rmmr_config_free(struct RmmrConfig *cfg);

/**
 * Generates the corpus described by `cfg` from its seed.
 *
 * # Safety
 * `cfg` must be a live handle; `out` a valid pointer.
 */
enum RmmrStatus rmmr_corpus_generate(const struct RmmrConfig *cfg, struct RmmrCorpus **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum RmmrStatus rmmr_corpus_read(const char *path, struct RmmrCorpus **out);

/**
 * # Safety
 * `corpus` must be a live handle; `path` a NUL-terminated string.
 */
enum RmmrStatus rmmr_corpus_write(const struct RmmrCorpus *corpus, const char *path);

/**
 * Number of samples; 0 for a null handle.
 *
 * # Safety
 * `corpus` must be null or a live handle.
 */
size_t rmmr_corpus_len(const struct RmmrCorpus *corpus);

/**
 * Class label of sample `index`, written to `out`.
 *
 * # Safety
 * `corpus` must be a live handle; `out` a valid pointer.
 */
enum RmmrStatus rmmr_corpus_label(const struct RmmrCorpus *corpus, size_t index, size_t *out);

/**
 * # Safety
 * `corpus` must be null or a handle not yet freed.
 */
void rmmr_corpus_free(struct RmmrCorpus *corpus);

/**
 * Trains from scratch for the configured number of steps.
 *
 * # Safety
 * `cfg` and `corpus` must be live handles; `out` a valid pointer.
 */
enum RmmrStatus rmmr_train(const struct RmmrConfig *cfg,
                           const struct RmmrCorpus *corpus,
                           struct RmmrCheckpoint **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum RmmrStatus rmmr_checkpoint_load(const char *path, struct RmmrCheckpoint **out);

/**
 * # Safety
 * `ckpt` must be a live handle; `path` a NUL-terminated string.
 */
enum RmmrStatus rmmr_checkpoint_save(const struct RmmrCheckpoint *ckpt, const char *path);

/**
 * Number of completed updates; 0 for a null handle.
 *
 * # Safety
 * `ckpt` must be null or a live handle.
 */
size_t rmmr_checkpoint_step(const struct RmmrCheckpoint *ckpt);

/**
 * Embedding width of the checkpoint's model; 0 for a null handle.
 *
 * # Safety
 * `ckpt` must be null or a live handle.
 */
size_t rmmr_checkpoint_embed_dim(const struct RmmrCheckpoint *ckpt);

/**
 * # Safety
 * `ckpt` must be null or a handle not yet freed.
 */
void rmmr_checkpoint_free(struct RmmrCheckpoint *ckpt);

/**
 * Fused embeddings of every sample at `severity`, row-major `n × d` into
 * `out`. `out_len` receives `n·d`; when `cap` is smaller nothing is written
 * and `BufferTooSmall` is returned.
 *
 * # Safety
 * Handles must be live; `out` must point to `cap` writable doubles (or be
 * null with `cap == 0`); `out_len` must be valid.
 */
enum RmmrStatus rmmr_embed(const struct RmmrCheckpoint *ckpt,
                           const struct RmmrCorpus *corpus,
                           double severity,
                           double *out,
                           size_t cap,
                           size_t *out_len);

/**
 * Absolute percentage-point drop `acc_id − acc_cd`.
 */
double rmmr_domain_drop(double acc_id, double acc_cd);

/**
 * Warmup/decay learning rate at `step`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum RmmrStatus rmmr_lr_at(size_t step,
                           size_t total_steps,
                           double warmup_ratio,
                           double base_lr,
                           double *out);

#endif  /* ROBUST_MMR_H */
