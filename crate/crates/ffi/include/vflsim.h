#ifndef VFLSIM_H
#define VFLSIM_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VflStatus {
  VFL_STATUS_OK = 0,
  VFL_STATUS_NULL_POINTER = 1,
  VFL_STATUS_INVALID_ARGUMENT = 2,
  VFL_STATUS_CONFIG = 3,
  VFL_STATUS_IO = 4,
  VFL_STATUS_DECODE = 5,
  VFL_STATUS_RUNTIME = 6,
  VFL_STATUS_PANIC = 7,
} VflStatus;

typedef struct VflDataset VflDataset;

typedef struct VflDefense VflDefense;

typedef struct VflMessage VflMessage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *vfl_last_error(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void vfl_string_free(char *s);

/**
 * Generates a synthetic click log.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VflStatus vfl_dataset_generate(size_t n_samples,
                                    size_t n_users,
                                    size_t n_ads,
                                    double positive_rate,
                                    double nonlabel_signal_strength,
                                    uint64_t seed,
                                    struct VflDataset **out);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum VflStatus vfl_dataset_read_tsv(const char *path, struct VflDataset **out);

/**
 * Number of samples; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t vfl_dataset_len(const struct VflDataset *ds);

/**
 * Fraction of positive labels; NaN for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
double vfl_dataset_positive_rate(const struct VflDataset *ds);

/**
 * Copies labels into `out` (length `vfl_dataset_len`).
 *
 * # Safety
 * `ds` must be a live handle and `out` must hold `len` bytes.
 */
enum VflStatus vfl_dataset_labels(const struct VflDataset *ds, uint8_t *out, size_t len);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void vfl_dataset_free(struct VflDataset *ds);

/**
 * MixPro defense with mixing parameter `alpha` and cosine target `phi_goal`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VflStatus vfl_mixpro_new(double alpha,
                              double phi_goal,
                              uint64_t seed,
                              struct VflDefense **out);

/**
 * Per-sample clipping followed by Gaussian noise.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VflStatus vfl_dp_new(double clip_norm,
                          double noise_sigma,
                          uint64_t seed,
                          struct VflDefense **out);

/**
 * Perturbs a row-major `rows × cols` gradient batch into `out` (same shape).
 *
 * # Safety
 * `grads` and `out` must each hold `rows * cols` values; `d` must be live.
 */
enum VflStatus vfl_defense_apply(struct VflDefense *d,
                                 const double *grads,
                                 size_t rows,
                                 size_t cols,
                                 double *out);

/**
 * # Safety
 * `d` must be null or a handle not yet freed.
 */
void vfl_defense_free(struct VflDefense *d);

/**
 * Rank AUC with tie averaging.
 *
 * # Safety
 * `scores` and `labels` must each hold `n` values; `out` must be valid.
 */
enum VflStatus vfl_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Mean negative log likelihood of positive-class probabilities.
 *
 * # Safety
 * `probs` and `labels` must each hold `n` values; `out` must be valid.
 */
enum VflStatus vfl_nll(const double *probs, const uint8_t *labels, size_t n, double *out);

/**
 * Builds a message. `kind` is 0 for embeddings, 1 for cut gradients;
 * `payload` is row-major `n_ids × dim`.
 *
 * # Safety
 * `ids` must hold `n_ids` nul-terminated strings, `payload` `n_ids * dim`
 * values, and `out` must be valid.
 */
enum VflStatus vfl_message_new(uint8_t kind,
                               uint64_t seq,
                               const char *const *ids,
                               size_t n_ids,
                               const float *payload,
                               size_t dim,
                               struct VflMessage **out);

/**
 * Serializes into a library-owned buffer released with [`vfl_bytes_free`].
 *
 * # Safety
 * `msg` must be live; `out` and `out_len` must be valid.
 */
enum VflStatus vfl_message_encode(const struct VflMessage *msg, uint8_t **out, size_t *out_len);

/**
 * # Safety
 * `bytes` must hold `len` bytes; `out` must be valid.
 */
enum VflStatus vfl_message_decode(const uint8_t *bytes, size_t len, struct VflMessage **out);

/**
 * # Safety
 * `msg` must be a live handle.
 */
uint8_t vfl_message_kind(const struct VflMessage *msg);

/**
 * # Safety
 * `msg` must be a live handle.
 */
uint64_t vfl_message_seq(const struct VflMessage *msg);

/**
 * # Safety
 * `msg` must be a live handle.
 */
size_t vfl_message_batch_size(const struct VflMessage *msg);

/**
 * # Safety
 * `msg` must be a live handle.
 */
size_t vfl_message_dim(const struct VflMessage *msg);

/**
 * Copies the payload into `out`, which must hold `batch_size * dim` values.
 *
 * # Safety
 * `msg` must be live and `out` must hold `len` values.
 */
enum VflStatus vfl_message_payload(const struct VflMessage *msg, float *out, size_t len);

/**
 * Sample ID at `index` as a new string released with [`vfl_string_free`].
 *
 * # Safety
 * `msg` must be live and `out` valid.
 */
enum VflStatus vfl_message_id(const struct VflMessage *msg, size_t index, char **out);

/**
 * # Safety
 * `msg` must be null or a handle not yet freed.
 */
void vfl_message_free(struct VflMessage *msg);

/**
 * Releases a buffer from [`vfl_message_encode`].
 *
 * # Safety
 * `bytes`/`len` must come from that call.
 */
void vfl_bytes_free(uint8_t *bytes, size_t len);

/**
 * Runs an experiment from config text and returns its report as JSON.
 * With `write_artifacts` non-zero, outputs go under `out_dir`.
 *
 * # Safety
 * `config_text` and `out_dir` must be nul-terminated strings; `out_json`
 * must be valid. The JSON is released with [`vfl_string_free`].
 */
enum VflStatus vfl_run_experiment(const char *config_text,
                                  const char *out_dir,
                                  int32_t write_artifacts,
                                  char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VFLSIM_H */
