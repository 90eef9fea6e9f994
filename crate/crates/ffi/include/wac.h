#ifndef WAC_H
#define WAC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum WacStatus {
  WAC_STATUS_OK = 0,
  WAC_STATUS_NULL_POINTER = 1,
  WAC_STATUS_INVALID_ARGUMENT = 2,
  WAC_STATUS_CONFIG = 3,
  WAC_STATUS_IO = 4,
  WAC_STATUS_NUMERIC = 5,
  WAC_STATUS_PANIC = 6,
} WacStatus;

/**
 * A generated or loaded dataset.
 */
typedef struct WacDataset WacDataset;

/**
 * The record of one finished training run.
 */
typedef struct WacRun WacRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *wac_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *wac_version(void);

/**
 * Generate the dataset described by the `[mixture]` section of a TOML config.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WacStatus wac_dataset_generate(const char *config_toml, struct WacDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WacStatus wac_dataset_load(const char *path, struct WacDataset **out);

/**
 * # Safety
 * `dataset` must come from this library; `path` must be NUL-terminated.
 */
enum WacStatus wac_dataset_save(const struct WacDataset *dataset, const char *path);

/**
 * Number of samples; `dense` (optional) receives the number tagged dense.
 *
 * # Safety
 * `dataset` must come from this library; `len` must be valid, `dense` valid or null.
 */
enum WacStatus wac_dataset_len(const struct WacDataset *dataset, size_t *len, size_t *dense);

/**
 * # Safety
 * `dataset` must come from this library (or be null) and not be used afterwards.
 */
void wac_dataset_free(struct WacDataset *dataset);

/**
 * Train one method on the config's dataset. `mode` may be null to use `train.mode`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be valid.
 */
enum WacStatus wac_train(const char *config_toml, const char *mode, struct WacRun **out);

/**
 * Copy the averaged weights into `buf`. With a null `buf`, only the length is reported.
 *
 * # Safety
 * `run` must come from this library; `buf` must hold `cap` doubles (or be null).
 */
enum WacStatus wac_run_beta_bar(const struct WacRun *run, double *buf, size_t cap, size_t *len);

/**
 * Copy the averaged parameters into `buf`. With a null `buf`, only the length is reported.
 *
 * # Safety
 * As for [`wac_run_beta_bar`].
 */
enum WacStatus wac_run_theta_bar(const struct WacRun *run, double *buf, size_t cap, size_t *len);

/**
 * # Safety
 * `run` must come from this library (or be null) and not be used afterwards.
 */
void wac_run_free(struct WacRun *run);

/**
 * One exponentiated-gradient step on a sample weight.
 *
 * # Safety
 * `out` must be valid.
 */
enum WacStatus wac_eg_update(double beta, double ce, double ac, double eta, double *out);

/**
 * # Safety
 * `out` must be valid.
 */
enum WacStatus wac_recommended_lr(double gamma,
                                  double c_theta,
                                  double c_b,
                                  size_t n,
                                  uint64_t t,
                                  double *out);

/**
 * # Safety
 * `out` must be valid.
 */
enum WacStatus wac_theoretical_bound(double gamma,
                                     double c_theta,
                                     double c_b,
                                     size_t n,
                                     uint64_t t,
                                     double *out);

/**
 * Dice score of two row-major binary masks (nonzero = foreground).
 * `legacy` selects the convention that scores an empty ground truth as 1.
 *
 * # Safety
 * `pred` and `gt` must each hold `height * width` bytes; `out` must be valid.
 */
enum WacStatus wac_dsc(const uint8_t *pred,
                       const uint8_t *gt,
                       size_t height,
                       size_t width,
                       bool legacy,
                       double *out);

/**
 * 95th-percentile Hausdorff distance. When exactly one mask is empty, `defined`
 * receives false and `out` is set to 0.
 *
 * # Safety
 * As for [`wac_dsc`]; `defined` must be valid.
 */
enum WacStatus wac_hd95(const uint8_t *pred,
                        const uint8_t *gt,
                        size_t height,
                        size_t width,
                        double *out,
                        bool *defined);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WAC_H */
