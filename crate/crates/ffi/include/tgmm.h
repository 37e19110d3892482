#ifndef TGMM_H
#define TGMM_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define TGMM_SPLIT_TRAIN 0

#define TGMM_SPLIT_VAL 1

#define TGMM_SPLIT_TEST 2

#define TGMM_POLICY_TRAIN_MASK 0

#define TGMM_POLICY_EVAL_MASK 1

typedef enum TgmmStatus {
  TGMM_STATUS_OK = 0,
  TGMM_STATUS_NULL_ARGUMENT = 1,
  TGMM_STATUS_INVALID_ARGUMENT = 2,
  TGMM_STATUS_CONTRACT = 3,
  TGMM_STATUS_DATA = 4,
  TGMM_STATUS_NUMERIC = 5,
  TGMM_STATUS_IO = 6,
  TGMM_STATUS_PANIC = 7,
} TgmmStatus;

// A spatio-temporal dataset with its sensor graph.
typedef struct TgmmDataset TgmmDataset;

// Halo-expanded patch partition of a sensor graph.
typedef struct TgmmPartition TgmmPartition;

// A trained model together with its run configuration.
typedef struct TgmmRun TgmmRun;

// Error metrics in original units.
typedef struct TgmmMetrics {
  double mae;
  double mape;
  double mse;
  size_t count;
} TgmmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none.
// The pointer stays valid until the next failing call on the same thread.
const char *tgmm_last_error_message(void);

void tgmm_clear_last_error(void);

// Library version as a static NUL-terminated string.
const char *tgmm_version(void);

// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum TgmmStatus tgmm_dataset_load(const char *dir, struct TgmmDataset **out);

// Multi-sine dataset on a random geometric graph of `nodes` sensors.
//
// # Safety
// `out` must be a valid pointer.
enum TgmmStatus tgmm_dataset_generate_mso(size_t nodes,
                                          size_t steps,
                                          size_t oscillators,
                                          double noise_sigma,
                                          uint64_t seed,
                                          struct TgmmDataset **out);

// # Safety
// `ds` must be a live dataset handle and `dir` a NUL-terminated string.
enum TgmmStatus tgmm_dataset_save(const struct TgmmDataset *ds, const char *dir);

// Copy of `ds` with each observed entry hidden with probability `p`.
//
// # Safety
// `ds` must be a live dataset handle and `out` a valid pointer.
enum TgmmStatus tgmm_dataset_inject_point(const struct TgmmDataset *ds,
                                          double p,
                                          uint64_t seed,
                                          struct TgmmDataset **out);

// Node, timestep and channel counts; any output pointer may be null.
//
// # Safety
// `ds` must be a live dataset handle; non-null outputs must be valid.
enum TgmmStatus tgmm_dataset_shape(const struct TgmmDataset *ds,
                                   size_t *nodes,
                                   size_t *timesteps,
                                   size_t *channels);

// # Safety
// `ds` must be null or a handle not yet freed.
void tgmm_dataset_free(struct TgmmDataset *ds);

// Partitions the dataset graph into `patches` cores and adds one-hop halos.
//
// # Safety
// `ds` must be a live dataset handle and `out` a valid pointer.
enum TgmmStatus tgmm_partition_new(const struct TgmmDataset *ds,
                                   size_t patches,
                                   double imbalance,
                                   uint64_t seed,
                                   struct TgmmPartition **out);

// # Safety
// `ds` must be a live dataset handle, `path` a NUL-terminated string and
// `out` a valid pointer.
enum TgmmStatus tgmm_partition_load(const struct TgmmDataset *ds,
                                    const char *path,
                                    struct TgmmPartition **out);

// # Safety
// `part` must be a live partition handle and `path` a NUL-terminated string.
enum TgmmStatus tgmm_partition_save(const struct TgmmPartition *part, const char *path);

// Number of patches, or 0 for a null handle.
//
// # Safety
// `part` must be null or a live partition handle.
size_t tgmm_partition_num_patches(const struct TgmmPartition *part);

// Core patch of `node`.
//
// # Safety
// `part` must be a live partition handle and `out` a valid pointer.
enum TgmmStatus tgmm_partition_core_of(const struct TgmmPartition *part, size_t node, size_t *out);

// Number of halo patches containing `node`.
//
// # Safety
// `part` must be a live partition handle and `out` a valid pointer.
enum TgmmStatus tgmm_partition_membership_count(const struct TgmmPartition *part,
                                                size_t node,
                                                size_t *out);

// # Safety
// `part` must be null or a handle not yet freed.
void tgmm_partition_free(struct TgmmPartition *part);

// Trains on `ds` and writes the run directory `out_dir`.
//
// `config_json` is a run configuration in JSON (null for defaults);
// `part` may be null to partition from the configuration.
//
// # Safety
// Handles must be live or null where allowed, strings NUL-terminated and
// `out` a valid pointer.
enum TgmmStatus tgmm_train(const struct TgmmDataset *ds,
                           const struct TgmmPartition *part,
                           const char *config_json,
                           const char *out_dir,
                           struct TgmmRun **out);

// Restores the best checkpoint of the run directory `dir` for `ds`.
//
// # Safety
// `ds` must be a live dataset handle, `dir` a NUL-terminated string and
// `out` a valid pointer.
enum TgmmStatus tgmm_run_load(const char *dir, const struct TgmmDataset *ds, struct TgmmRun **out);

// Scores the run on one split (`TGMM_SPLIT_*`) under `TGMM_POLICY_*`.
//
// # Safety
// Handles must be live and `out` a valid pointer.
enum TgmmStatus tgmm_run_evaluate(const struct TgmmRun *run,
                                  const struct TgmmDataset *ds,
                                  uint32_t split,
                                  uint32_t policy,
                                  struct TgmmMetrics *out);

// Writes the prediction CSV for one split; `rows` (nullable) receives the row count.
//
// # Safety
// Handles must be live, `path` NUL-terminated and `rows` null or valid.
enum TgmmStatus tgmm_run_predict(const struct TgmmRun *run,
                                 const struct TgmmDataset *ds,
                                 uint32_t split,
                                 const char *path,
                                 size_t *rows);

// Number of trainable scalars, or 0 for a null handle.
//
// # Safety
// `run` must be null or a live run handle.
size_t tgmm_run_num_parameters(const struct TgmmRun *run);

// # Safety
// `run` must be null or a handle not yet freed.
void tgmm_run_free(struct TgmmRun *run);

// Runs the gradient checks of `module` (`"all"` or a module name) and
// stores the largest relative error. Returns `TGMM_STATUS_NUMERIC` if it
// exceeds the tolerance.
//
// # Safety
// `module` must be NUL-terminated and `max_rel_error` null or valid.
enum TgmmStatus tgmm_gradcheck(const char *module, double *max_rel_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TGMM_H */
