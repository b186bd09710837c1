#ifndef LDPNN_H
#define LDPNN_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LdpnnActivation {
  LDPNN_ACTIVATION_RELU = 0,
  LDPNN_ACTIVATION_TANH = 1,
  LDPNN_ACTIVATION_LINEAR = 2,
} LdpnnActivation;

/**
 * Result codes.
 */
typedef enum LdpnnStatus {
  LDPNN_STATUS_OK = 0,
  LDPNN_STATUS_NULL_POINTER = 1,
  LDPNN_STATUS_INVALID_ARGUMENT = 2,
  LDPNN_STATUS_DIMENSION_MISMATCH = 3,
  LDPNN_STATUS_NOT_CONVERGED = 4,
  LDPNN_STATUS_NUMERICAL = 5,
  LDPNN_STATUS_SAMPLER = 6,
  LDPNN_STATUS_PANIC = 7,
} LdpnnStatus;

/**
 * Opaque training set plus test inputs.
 */
typedef struct LdpnnDataset LdpnnDataset;

/**
 * Opaque rate solver bound to one input set.
 */
typedef struct LdpnnSolver LdpnnSolver;

/**
 * Network description; `linear_a` is read only for the linear activation.
 */
typedef struct LdpnnNetwork {
  uint32_t depth;
  enum LdpnnActivation activation;
  double linear_a;
  size_t d_in;
  double bias_variance;
} LdpnnNetwork;

/**
 * One rate evaluation. `is_infinite` is 1 when the rate is infinite, in
 * which case `value` is `INFINITY`.
 */
typedef struct LdpnnRate {
  double value;
  int32_t is_infinite;
  int32_t converged;
  double kernel_gap;
  double outer_grad_norm;
} LdpnnRate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *ldpnn_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *ldpnn_version(void);

/**
 * Creates a solver on `m` inputs stored row-major in `x` (`m * d_in` values)
 * with default optimizer settings.
 *
 * # Safety
 * `net` and `out` must be valid pointers and `x` must hold `m * net.d_in`
 * values.
 */
enum LdpnnStatus ldpnn_solver_new(const struct LdpnnNetwork *net,
                                  const double *x,
                                  size_t m,
                                  struct LdpnnSolver **out);

/**
 * # Safety
 * `solver` must be null or a handle from [`ldpnn_solver_new`] not yet freed.
 */
void ldpnn_solver_free(struct LdpnnSolver *solver);

/**
 * Prior output rate of the output vector `h` (one value per input).
 *
 * # Safety
 * `solver` must be a live handle, `h` must hold `m` values and `out` must
 * be valid.
 */
enum LdpnnStatus ldpnn_solver_prior_rate(struct LdpnnSolver *solver,
                                         const double *h,
                                         size_t m,
                                         struct LdpnnRate *out);

/**
 * Kernel rate of hidden layer `layer` (1-based) at the `m x m` row-major
 * kernel `kappa`.
 *
 * # Safety
 * `solver` must be a live handle, `kappa` must hold `m * m` values and
 * `out` must be valid.
 */
enum LdpnnStatus ldpnn_solver_kernel_rate(struct LdpnnSolver *solver,
                                          const double *kappa,
                                          size_t m,
                                          uint32_t layer,
                                          struct LdpnnRate *out);

/**
 * Builds a dataset from `n_train` training pairs and `n_test` test inputs,
 * all row-major with `d_in` columns.
 *
 * # Safety
 * Array arguments must hold the stated number of values; `out` must be valid.
 */
enum LdpnnStatus ldpnn_dataset_new(const double *train_x,
                                   const double *train_y,
                                   size_t n_train,
                                   const double *test_x,
                                   size_t n_test,
                                   size_t d_in,
                                   struct LdpnnDataset **out);

/**
 * Heaviside targets on `{-3, ..., 2}` plus `n_test` scalar test inputs.
 *
 * # Safety
 * `test_x` must hold `n_test` values; `out` must be valid.
 */
enum LdpnnStatus ldpnn_dataset_heaviside6(const double *test_x,
                                          size_t n_test,
                                          struct LdpnnDataset **out);

/**
 * # Safety
 * `data` must be null or a live dataset handle.
 */
void ldpnn_dataset_free(struct LdpnnDataset *data);

/**
 * LDP-MAP prediction at `x_test` (`d_in` values, one of the dataset inputs).
 *
 * # Safety
 * Pointers must be valid; `x_test` must hold `net.d_in` values.
 */
enum LdpnnStatus ldpnn_map_predict(const struct LdpnnNetwork *net,
                                   const struct LdpnnDataset *data,
                                   const double *x_test,
                                   double *y_out);

/**
 * Fixed-kernel regression mean and variance at `x` for an `m x m`
 * row-major kernel over the dataset inputs.
 *
 * # Safety
 * Pointers must be valid; `kappa` holds `m * m` values and `x` holds the
 * dataset input dimension.
 */
enum LdpnnStatus ldpnn_gp_posterior(const double *kappa,
                                    size_t m,
                                    const struct LdpnnDataset *data,
                                    const double *x,
                                    double *mean_out,
                                    double *var_out);

/**
 * Closed-form output rate of the bias-free linear chain with `layers`
 * hidden layers.
 *
 * # Safety
 * `out` must be valid.
 */
enum LdpnnStatus ldpnn_output_rate_linear(double y,
                                          double a,
                                          double kappa0,
                                          uint32_t layers,
                                          double *out);

/**
 * Draws `n_samples` values of `h(x) / sqrt(width)` into `out`.
 *
 * # Safety
 * `net` must be valid, `x` must hold `net.d_in` values and `out` must have
 * room for `n_samples` values.
 */
enum LdpnnStatus ldpnn_sample_prior_outputs(const struct LdpnnNetwork *net,
                                            size_t width,
                                            uint64_t n_samples,
                                            uint64_t seed,
                                            const double *x,
                                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LDPNN_H */
