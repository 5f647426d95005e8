/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef CRF_H
#define CRF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum CrfStatus {
  CRF_STATUS_OK = 0,
  CRF_STATUS_NULL_ARGUMENT = 1,
  CRF_STATUS_CONFIG = 2,
  CRF_STATUS_DATA = 3,
  CRF_STATUS_FIT = 4,
  CRF_STATUS_PANIC = 5,
  CRF_STATUS_LENGTH_MISMATCH = 6,
} CrfStatus;

/*
 Opaque dataset handle.
 */
typedef struct CrfDataset CrfDataset;

/*
 Opaque fitted-model handle.
 */
typedef struct CrfModel CrfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or an empty string.
 The pointer stays valid until the next call on this thread.
 */
const char *crf_last_error(void);

/*
 Loads a CSV dataset with the default column roles.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CrfStatus crf_dataset_load_csv(const char *path, struct CrfDataset **out);

/*
 Draws a synthetic dataset. `tau_form` is `constant:C` or
 `step:FEATURE:LOW:HIGH`.

 # Safety
 `tau_form` must be a NUL-terminated string; `out` must be writable.
 */
enum CrfStatus crf_dataset_simulate(size_t n,
                                    size_t d_num,
                                    size_t d_cat,
                                    uint64_t seed,
                                    const char *tau_form,
                                    double confounding_strength,
                                    struct CrfDataset **out);

/*
 Row count, or 0 for a null handle.

 # Safety
 `ds` must be null or a live dataset handle.
 */
size_t crf_dataset_rows(const struct CrfDataset *ds);

/*
 Copies the true effects `mu1 - mu0` into `out` (length `len`).

 # Safety
 `ds` must be a live handle; `out` must hold `len` doubles.
 */
enum CrfStatus crf_dataset_true_effects(const struct CrfDataset *ds, double *out, size_t len);

/*
 Releases a dataset handle. Null is ignored.

 # Safety
 `ds` must be null or a handle not yet freed.
 */
void crf_dataset_free(struct CrfDataset *ds);

/*
 Fits a model. `config_json` is a run configuration document as
 accepted by the `crf` command, or null for the defaults.

 # Safety
 `ds` must be a live handle; `config_json` null or NUL-terminated;
 `out` writable.
 */
enum CrfStatus crf_model_fit(const struct CrfDataset *ds,
                             const char *config_json,
                             struct CrfModel **out);

/*
 Writes a model file.

 # Safety
 `model` must be a live handle; `path` NUL-terminated.
 */
enum CrfStatus crf_model_save(const struct CrfModel *model, const char *path);

/*
 Reads a model file.

 # Safety
 `path` must be NUL-terminated; `out` writable.
 */
enum CrfStatus crf_model_load(const char *path, struct CrfModel **out);

/*
 Predicts effects for every row of `ds` into `out` (length `len`).

 # Safety
 `model` and `ds` must be live handles; `out` must hold `len` doubles.
 */
enum CrfStatus crf_model_predict(const struct CrfModel *model,
                                 const struct CrfDataset *ds,
                                 double *out,
                                 size_t len);

/*
 Rule report as a JSON document. `top_k = 0` keeps every rule.

 # Safety
 `model` must be a live handle; `out` writable. Release the string with
 `crf_string_free`.
 */
enum CrfStatus crf_model_rules_json(const struct CrfModel *model,
                                    size_t top_k,
                                    bool minimize,
                                    char **out);

/*
 Releases a model handle. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void crf_model_free(struct CrfModel *model);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must be null or a string from this library not yet freed.
 */
void crf_string_free(char *s);

/*
 Root mean squared error between two effect vectors of length `len`.

 # Safety
 `tau_hat` and `tau` must each hold `len` doubles; `out` writable.
 */
enum CrfStatus crf_pehe(const double *tau_hat, const double *tau, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRF_H */
