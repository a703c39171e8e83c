#ifndef REFGAME_H
#define REFGAME_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RgStatus {
  RG_STATUS_OK = 0,
  RG_STATUS_NULL_POINTER = 1,
  RG_STATUS_INVALID_ARGUMENT = 2,
  RG_STATUS_CONFIG = 3,
  RG_STATUS_IO = 4,
  RG_STATUS_RUNTIME = 5,
  RG_STATUS_BUFFER_TOO_SMALL = 6,
  RG_STATUS_PANIC = 7,
} RgStatus;

typedef enum RgLoss {
  RG_LOSS_CE = 0,
  RG_LOSS_CE_RSA = 1,
} RgLoss;

/**
 * Opaque experiment configuration.
 */
typedef struct RgConfig RgConfig;

/**
 * Opaque result of a completed training run.
 */
typedef struct RgRun RgRun;

/**
 * Final metrics of one trained seed.
 */
typedef struct RgSeedSummary {
  uint64_t seed;
  double train_accuracy;
  double val_accuracy;
  double topsim;
  double rsa_sl;
  double rsa_si;
  double rsa_li;
  /**
   * NaN when the dataset has no noise pairs.
   */
  double noise_accuracy;
  /**
   * NaN when the dataset has no Winoground-style pairs.
   */
  double winoground_accuracy;
} RgSeedSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rg_version(void);

/**
 * Copies the calling thread's last error message into `buf`.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes; `needed` null or writable.
 */
enum RgStatus rg_last_error(char *buf, size_t cap, size_t *needed);

/**
 * Creates a configuration holding the defaults.
 *
 * # Safety
 * `out` must be writable.
 */
enum RgStatus rg_config_new(struct RgConfig **out);

/**
 * Parses a TOML configuration layered over the defaults.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` writable.
 */
enum RgStatus rg_config_from_toml(const char *toml, struct RgConfig **out);

/**
 * Releases a configuration. Null is ignored.
 *
 * # Safety
 * `cfg` must come from `rg_config_new`/`rg_config_from_toml` and not be
 * used afterwards.
 */
void rg_config_free(struct RgConfig *cfg);

/**
 * Sets the training loss.
 *
 * # Safety
 * `cfg` must be a live configuration handle.
 */
enum RgStatus rg_config_set_loss(struct RgConfig *cfg, enum RgLoss loss);

/**
 * Sets the number of training epochs. Invalid values leave the
 * configuration unchanged.
 *
 * # Safety
 * `cfg` must be a live configuration handle.
 */
enum RgStatus rg_config_set_epochs(struct RgConfig *cfg, size_t epochs);

/**
 * Sets the message channel: vocabulary size and maximum length.
 *
 * # Safety
 * `cfg` must be a live configuration handle.
 */
enum RgStatus rg_config_set_channel(struct RgConfig *cfg, size_t vocab, size_t max_len);

/**
 * Replaces the seed list with `n` seeds read from `seeds`.
 *
 * # Safety
 * `seeds` must be valid for `n` reads.
 */
enum RgStatus rg_config_set_seeds(struct RgConfig *cfg, const uint64_t *seeds, size_t n);

/**
 * Sets the output root directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum RgStatus rg_config_set_out_dir(struct RgConfig *cfg, const char *path);

/**
 * Serializes the configuration as TOML into `buf` (see `rg_last_error`
 * for the buffer convention).
 *
 * # Safety
 * `cfg` must be live; `buf` null or valid for `cap` bytes; `needed` null
 * or writable.
 */
enum RgStatus rg_config_to_toml(const struct RgConfig *cfg, char *buf, size_t cap, size_t *needed);

/**
 * Trains every configured seed (skipping seeds already completed in the
 * run directory) on up to `workers` threads.
 *
 * # Safety
 * `cfg` must be live and `out` writable.
 */
enum RgStatus rg_run(const struct RgConfig *cfg, size_t workers, struct RgRun **out);

/**
 * Number of seed summaries in a run.
 *
 * # Safety
 * `run` must be null or a live run handle.
 */
size_t rg_run_seed_count(const struct RgRun *run);

/**
 * Copies the summary of the `index`-th seed.
 *
 * # Safety
 * `run` must be live and `out` writable.
 */
enum RgStatus rg_run_summary(const struct RgRun *run, size_t index, struct RgSeedSummary *out);

/**
 * Copies the run directory path.
 *
 * # Safety
 * As for `rg_config_to_toml`.
 */
enum RgStatus rg_run_dir(const struct RgRun *run, char *buf, size_t cap, size_t *needed);

/**
 * Releases a run. Null is ignored.
 *
 * # Safety
 * `run` must come from `rg_run` and not be used afterwards.
 */
void rg_run_free(struct RgRun *run);

/**
 * Representational similarity between two row-major matrices describing
 * the same `n` items: `x` is `n × dx`, `y` is `n × dy`.
 *
 * # Safety
 * `x` and `y` must be valid for `n*dx` and `n*dy` reads; `out` writable.
 */
enum RgStatus rg_rsa(const double *x, size_t dx, const double *y, size_t dy, size_t n, double *out);

/**
 * Standardized soft ranks of `n` values with smoothness `epsilon`,
 * written to `out` (length `n`).
 *
 * # Safety
 * `values` and `out` must be valid for `n` elements.
 */
enum RgStatus rg_soft_ranks(const double *values, size_t n, double epsilon, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REFGAME_H */
