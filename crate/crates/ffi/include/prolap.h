#ifndef PROLAP_H
#define PROLAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum ProlapStatus {
  PROLAP_STATUS_OK = 0,
  // A required pointer argument was NULL.
  PROLAP_STATUS_NULL_POINTER = 1,
  // Invalid argument or configuration.
  PROLAP_STATUS_USAGE = 2,
  // Unreadable, malformed or mismatched data.
  PROLAP_STATUS_DATA = 3,
  // Non-finite values or a failed numerical routine.
  PROLAP_STATUS_NUMERICAL = 4,
  // An internal panic was caught.
  PROLAP_STATUS_PANIC = 5,
} ProlapStatus;

// Which encoder `prolap_model_embed` runs.
typedef enum ProlapModality {
  PROLAP_MODALITY_AUDIO = 0,
  PROLAP_MODALITY_TEXT = 1,
} ProlapModality;

// Opaque synthetic dataset.
typedef struct ProlapDataset ProlapDataset;

// Opaque trained model.
typedef struct ProlapModel ProlapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL after a success.
// The pointer stays valid until the next call into this library on the same
// thread.
const char *prolap_last_error(void);

// Library version as a static NUL-terminated string.
const char *prolap_version(void);

// Corrected similarity `mu_a . mu_t - (tr Sigma_a + tr Sigma_t) / 2`.
//
// # Safety
// Every array must hold `d` doubles; `out_value` must be writable.
enum ProlapStatus prolap_csd_similarity(const double *mu_a,
                                        const double *log_var_a,
                                        const double *mu_t,
                                        const double *log_var_t,
                                        size_t d,
                                        double *out_value);

// Inclusion statistic `H(z1 ⊂ z2)`; positive when `z2` contains `z1`.
//
// # Safety
// Every array must hold `d` doubles; `out_value` must be writable.
enum ProlapStatus prolap_inclusion_score(const double *mu1,
                                         const double *log_var1,
                                         const double *mu2,
                                         const double *log_var2,
                                         size_t d,
                                         double *out_value);

// Pairwise probabilistic contrastive loss for one pair with label `y = ±1`.
//
// # Safety
// Every array must hold `d` doubles; `out_value` must be writable.
enum ProlapStatus prolap_ppcl(const double *mu_a,
                              const double *log_var_a,
                              const double *mu_t,
                              const double *log_var_t,
                              size_t d,
                              int32_t y,
                              double alpha,
                              double beta,
                              double *out_value);

// `softplus(-c H(z1 ⊂ z2))`.
//
// # Safety
// Every array must hold `d` doubles; `out_value` must be writable.
enum ProlapStatus prolap_inclusion_loss(const double *mu1,
                                        const double *log_var1,
                                        const double *mu2,
                                        const double *log_var2,
                                        size_t d,
                                        double c,
                                        double *out_value);

// `KL(N(mu, sigma^2) || N(0, I))`.
//
// # Safety
// Both arrays must hold `d` doubles; `out_value` must be writable.
enum ProlapStatus prolap_kl_to_standard(const double *mu,
                                        const double *log_var,
                                        size_t d,
                                        double *out_value);

// Percentage of pairs `i` with `H(level4[i] ⊂ level1[i]) > 0`. Embeddings
// are packed row-major, `n` rows of `d` values per array.
//
// # Safety
// Every array must hold `n * d` doubles; `out_percent` must be writable.
enum ProlapStatus prolap_inclusion_test_rate(const double *mu1,
                                             const double *log_var1,
                                             const double *mu4,
                                             const double *log_var4,
                                             size_t n,
                                             size_t d,
                                             double *out_percent);

// Recall at 1, 5, 10 and mAP@10 from a row-major `n_queries x n_gallery`
// score matrix and a same-shaped 0/1 relevance matrix. Every query needs at
// least one relevant entry.
//
// # Safety
// `scores` and `relevant` must hold `n_queries * n_gallery` entries;
// `out_recall` must hold 3 doubles; `out_map10` must be writable.
enum ProlapStatus prolap_retrieval_metrics(const double *scores,
                                           const uint8_t *relevant,
                                           size_t n_queries,
                                           size_t n_gallery,
                                           double *out_recall,
                                           double *out_map10);

// Generates a dataset with default settings except the given size, width
// and seed.
//
// # Safety
// `out_dataset` must be writable; the result is freed with
// `prolap_dataset_free`.
enum ProlapStatus prolap_dataset_generate(size_t n_items,
                                          size_t d_in,
                                          uint64_t seed,
                                          struct ProlapDataset **out_dataset);

// # Safety
// `path` must be a NUL-terminated string; `out_dataset` must be writable.
enum ProlapStatus prolap_dataset_load(const char *path, struct ProlapDataset **out_dataset);

// # Safety
// `ds` must come from this library; `path` must be a NUL-terminated string.
enum ProlapStatus prolap_dataset_save(const struct ProlapDataset *ds, const char *path);

// Number of items; 0 for NULL.
//
// # Safety
// `ds` must be NULL or come from this library.
size_t prolap_dataset_len(const struct ProlapDataset *ds);

// Feature width; 0 for NULL or an empty dataset.
//
// # Safety
// `ds` must be NULL or come from this library.
size_t prolap_dataset_dim(const struct ProlapDataset *ds);

// Copies item `item`'s audio features (`level = 0`) or its Level-`level`
// caption (`1..=4`) into `out_features`, which holds `len` doubles.
//
// # Safety
// `ds` must come from this library; `out_features` must hold `len` doubles.
enum ProlapStatus prolap_dataset_features(const struct ProlapDataset *ds,
                                          size_t item,
                                          size_t level,
                                          double *out_features,
                                          size_t len);

// # Safety
// `ds` must be NULL or a dataset from this library not freed before.
void prolap_dataset_free(struct ProlapDataset *ds);

// Loads the model stored in a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out_model` must be writable.
enum ProlapStatus prolap_model_load(const char *path, struct ProlapModel **out_model);

// Trains on `ds`. `preset` (nullable) names a preset; `overrides`
// (nullable) holds `key = value` lines applied after it; `out_dir`
// (nullable) receives checkpoints and metrics.
//
// # Safety
// Strings must be NULL or NUL-terminated; `ds` must come from this library;
// `out_model` must be writable.
enum ProlapStatus prolap_train(const struct ProlapDataset *ds,
                               const char *preset,
                               const char *overrides,
                               const char *out_dir,
                               struct ProlapModel **out_model);

// Input width of both encoders; 0 for NULL.
//
// # Safety
// `m` must be NULL or come from this library.
size_t prolap_model_input_dim(const struct ProlapModel *m);

// Embedding width; 0 for NULL.
//
// # Safety
// `m` must be NULL or come from this library.
size_t prolap_model_output_dim(const struct ProlapModel *m);

// Embeds `x` (`d_in` values). `visible` is NULL for the raw input or holds
// `d_in` bytes, zero where the coordinate is replaced by the mask token.
// Writes `d_out` values to each of `out_mu` and `out_log_var`.
//
// # Safety
// Array lengths must match the given sizes; `m` must come from this library.
enum ProlapStatus prolap_model_embed(const struct ProlapModel *m,
                                     enum ProlapModality modality,
                                     const double *x,
                                     size_t d_in,
                                     const uint8_t *visible,
                                     double *out_mu,
                                     double *out_log_var,
                                     size_t d_out);

// The model's similarity (corrected similarity or cosine of the means)
// between an audio-side and a text-side embedding of width `d`.
//
// # Safety
// Every array must hold `d` doubles; `m` must come from this library.
enum ProlapStatus prolap_model_score(const struct ProlapModel *m,
                                     const double *mu_a,
                                     const double *log_var_a,
                                     const double *mu_t,
                                     const double *log_var_t,
                                     size_t d,
                                     double *out_value);

// # Safety
// `m` must be NULL or a model from this library not freed before.
void prolap_model_free(struct ProlapModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROLAP_H */
