#ifndef COTRAIN_H
#define COTRAIN_H

#include <stddef.h>
#include <stdint.h>

typedef enum CotrainStatus {
  COTRAIN_STATUS_OK = 0,
  COTRAIN_STATUS_NULL_POINTER = 1,
  COTRAIN_STATUS_INVALID_ARGUMENT = 2,
  COTRAIN_STATUS_IO = 3,
  COTRAIN_STATUS_FORMAT = 4,
  COTRAIN_STATUS_SHAPE = 5,
  COTRAIN_STATUS_CONFIG = 6,
  COTRAIN_STATUS_PRECONDITION = 7,
  COTRAIN_STATUS_NON_FINITE = 8,
  COTRAIN_STATUS_CHECKPOINT_MISMATCH = 9,
  COTRAIN_STATUS_MISSING_CASES = 10,
  COTRAIN_STATUS_PANIC = 11,
} CotrainStatus;

// Hard five-class label map.
typedef struct CotrainLabels CotrainLabels;

// Trained or freshly initialised dual-branch network.
typedef struct CotrainModel CotrainModel;

// Per-branch class probabilities (and reconstructions) for one volume.
typedef struct CotrainOutput CotrainOutput;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until
// the next failing call on the same thread.
const char *cotrain_last_error(void);

// Library version as a static NUL-terminated string.
const char *cotrain_version(void);

// Writes one synthetic phantom into caller buffers of `d*h*w` elements.
//
// # Safety
// `dims` points to 3 values; `image` and `labels` hold `d*h*w` elements.
enum CotrainStatus cotrain_generate_phantom(uint64_t seed,
                                            const size_t *dims,
                                            float *image,
                                            uint8_t *labels);

// Builds an untrained model. `variant` is one of `par`, `par_reco`, `mix`,
// `mix_reco`; zero `base_filters` or `depth` select the defaults.
//
// # Safety
// `variant` is a NUL-terminated string; `out` is writable.
enum CotrainStatus cotrain_model_new(const char *variant,
                                     size_t base_filters,
                                     size_t depth,
                                     uint64_t parameter_seed,
                                     struct CotrainModel **out);

// Loads a checkpoint written by `cotrain train`.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum CotrainStatus cotrain_model_load(const char *path, struct CotrainModel **out);

// # Safety
// `model` is null or a handle from this library not yet freed.
void cotrain_model_free(struct CotrainModel *model);

// Number of trainable parameters across both branches.
//
// # Safety
// `model` is a live handle; `out` is writable.
enum CotrainStatus cotrain_model_param_count(const struct CotrainModel *model, size_t *out);

// Runs both branches on a volume. With `normalize` nonzero the image is
// first clipped to its 1st/99th percentiles and rescaled to [0, 1].
// `spacing` may be null for 1 mm isotropic.
//
// # Safety
// `dims` and `spacing` point to 3 values; `image` holds `d*h*w` floats.
enum CotrainStatus cotrain_model_predict(const struct CotrainModel *model,
                                         const float *image,
                                         const size_t *dims,
                                         const double *spacing,
                                         int32_t normalize,
                                         struct CotrainOutput **out);

// Loads a dual-branch output saved by the toolkit.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum CotrainStatus cotrain_output_load(const char *path, struct CotrainOutput **out);

// Saves an output as `<stem>.json` + `<stem>.raw`.
//
// # Safety
// `output` is a live handle; `path` is a NUL-terminated string.
enum CotrainStatus cotrain_output_save(const struct CotrainOutput *output, const char *path);

// # Safety
// `output` is null or a handle from this library not yet freed.
void cotrain_output_free(struct CotrainOutput *output);

// Replaces the zone-to-branch assignment, e.g. `BG:I,PZ:I,TZ:II,DPU:I,AFS:II`.
//
// # Safety
// `output` is a live handle; `tag` is a NUL-terminated string.
enum CotrainStatus cotrain_output_set_assignment(struct CotrainOutput *output, const char *tag);

// Copies one class grid of one branch (0 = I, 1 = II) into `dst`.
//
// # Safety
// `output` is a live handle; `dst` holds `len` doubles.
enum CotrainStatus cotrain_output_probs(const struct CotrainOutput *output,
                                        uint8_t branch,
                                        uint8_t zone,
                                        double *dst,
                                        size_t len);

// Fusion, argmax, largest-component filtering and hole filling.
//
// # Safety
// `output` is a live handle; `out` is writable.
enum CotrainStatus cotrain_postprocess(const struct CotrainOutput *output,
                                       struct CotrainLabels **out);

// # Safety
// `labels` is a live handle; `dims` holds 3 values.
enum CotrainStatus cotrain_labels_shape(const struct CotrainLabels *labels, size_t *dims);

// # Safety
// `labels` is a live handle; `dst` holds `len` bytes.
enum CotrainStatus cotrain_labels_copy(const struct CotrainLabels *labels,
                                       uint8_t *dst,
                                       size_t len);

// # Safety
// `labels` is null or a handle from this library not yet freed.
void cotrain_labels_free(struct CotrainLabels *labels);

// Dice coefficient of one zone between two label arrays (1 when the zone
// is absent from both).
//
// # Safety
// `dims` holds 3 values; `pred` and `gt` hold `d*h*w` bytes.
enum CotrainStatus cotrain_dsc(const uint8_t *pred,
                               const uint8_t *gt,
                               const size_t *dims,
                               uint8_t zone,
                               double *out);

// Mean absolute boundary distance of one zone in millimetres; NaN when
// either label array lacks the zone. `spacing` may be null for 1 mm.
//
// # Safety
// `dims`/`spacing` hold 3 values; `pred` and `gt` hold `d*h*w` bytes.
enum CotrainStatus cotrain_mad(const uint8_t *pred,
                               const uint8_t *gt,
                               const size_t *dims,
                               const double *spacing,
                               uint8_t zone,
                               double *out);

// One-sided paired t-test of H1: mean(a - b) > 0.
//
// # Safety
// `a` and `b` hold `n` doubles; the outputs are writable.
enum CotrainStatus cotrain_paired_t_test(const double *a,
                                         const double *b,
                                         size_t n,
                                         double alpha,
                                         double *t_statistic,
                                         double *p_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COTRAIN_H */
