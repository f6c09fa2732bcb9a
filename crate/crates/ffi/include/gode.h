/* C interface for the gode model library.
 *
 * Every function returns a gode_status; results come back through out
 * pointers. Models are opaque handles released with gode_model_free. After a
 * non-OK status, gode_last_error() returns a thread-local message valid until
 * the next failing call on the same thread.
 *
 * Link against libgode_ffi (static or shared).
 */

#ifndef GODE_H
#define GODE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum gode_status {
  GODE_OK = 0,
  GODE_NULL_ARGUMENT = 1,
  GODE_INVALID_ARGUMENT = 2,
  GODE_IO = 3,
  GODE_COMPUTE = 4,
} gode_status;

/* Opaque model handle (f64 precision). */
typedef struct GodeModel GodeModel;

/* Thread-local message for the last failing call; empty when none. */
const char *gode_last_error(void);

/* Library version string. */
const char *gode_version(void);

/* Build a model from a JSON model-spec document, e.g.
 *   {"family":"gode","width":16,"control_points":4,"basis_degree":1}
 * Unknown keys are rejected. Initialization is deterministic in `seed`.
 */
gode_status gode_model_build(const char *spec_json, uint64_t seed,
                             GodeModel **out);

/* Load / save a GODE-CKPT-v1 checkpoint file. */
gode_status gode_model_load(const char *path, GodeModel **out);
gode_status gode_model_save(const GodeModel *model, const char *path);

/* Release a handle; null is a no-op. */
void gode_model_free(GodeModel *model);

gode_status gode_model_num_classes(const GodeModel *model, size_t *out);
gode_status gode_model_param_count(const GodeModel *model, uint64_t *out);

/* Forward pass. `input` is NCHW row-major with n*c*h*w doubles in [0,1];
 * `logits_out` receives n * num_classes doubles.
 */
gode_status gode_model_forward(const GodeModel *model, const double *input,
                               size_t n, size_t c, size_t h, size_t w,
                               double *logits_out, size_t logits_len);

/* All basis functions of a clamped uniform B-spline (degree, n_control) over
 * [0, t_max], evaluated at t. `out` receives n_control doubles that are
 * nonnegative and sum to 1.
 */
gode_status gode_basis_eval(uint32_t degree, uint32_t n_control, double t_max,
                            double t, double *out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* GODE_H */
