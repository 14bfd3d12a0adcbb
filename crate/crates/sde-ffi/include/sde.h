#ifndef SDE_H
#define SDE_H

/* Generated by the sde-ffi build script; edit src/lib.rs instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible entry point.
//
// `Ok` is zero so that `if (status) { ... }` reads as an error check in C.
typedef enum SdeStatus {
  // The call succeeded and all requested outputs were written.
  SDE_STATUS_OK = 0,
  // A required pointer argument was null.
  SDE_STATUS_NULL_ARGUMENT = 1,
  // An argument failed validation; see [`sde_last_error`].
  SDE_STATUS_INVALID_INPUT = 2,
  // A linear system factorization failed (singular or ill-posed matrix).
  SDE_STATUS_SINGULAR = 3,
  // An iteration diverged or exceeded its cap in a context where partial
  // results cannot be returned.
  SDE_STATUS_DIVERGED = 4,
  // Random-field sampling failed.
  SDE_STATUS_SAMPLING = 5,
  // A configuration value was rejected.
  SDE_STATUS_CONFIG = 6,
  // An input/output operation failed.
  SDE_STATUS_IO = 7,
  // A panic was caught at the boundary; the library state is still sound
  // but the call did nothing.
  SDE_STATUS_PANIC = 8,
} SdeStatus;

// Opaque handle to the truncated Karhunen–Loève conductivity field
// definition (mean, noise amplitude, correlation length, mode count).
typedef struct SdeField SdeField;

// Opaque handle to one drawn conductivity realization, evaluable at any
// point of the porous domain.
typedef struct SdeSample SdeSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sde_version(void);

// Message of the most recent failure on the calling thread, as a
// NUL-terminated string. Empty until the first failure. The pointer is
// owned by the library and stays valid until the next failing call on the
// same thread.
const char *sde_last_error(void);

// Create a conductivity field definition.
//
// `mean` is the constant mean conductivity, `sigma` the noise amplitude,
// `corr_len` the physical correlation length, and `n_frequencies` the
// number of retained frequencies (the expansion then carries
// `2 * n_frequencies + 1` uniform random coefficients).
//
// On success writes a heap-allocated handle to `*out`; release it with
// [`sde_field_free`].
//
// # Safety
//
// `out` must be a valid pointer to writable memory for one pointer.
enum SdeStatus sde_field_new(double mean,
                             double sigma,
                             double corr_len,
                             size_t n_frequencies,
                             struct SdeField **out);

// Create the default field definition (mean 1, amplitude 0.15, correlation
// length 0.25, three frequencies).
//
// # Safety
//
// `out` must be a valid pointer to writable memory for one pointer.
enum SdeStatus sde_field_default(struct SdeField **out);

// Release a field handle. Null is a no-op.
//
// # Safety
//
// `field` must be null or a pointer obtained from [`sde_field_new`] /
// [`sde_field_default`] that has not been freed yet.
void sde_field_free(struct SdeField *field);

// Draw one conductivity realization from the stream identified by
// `(seed, level, index)`. The draw is deterministic: the same triple always
// yields the same realization, and distinct triples yield independent
// streams, so Monte Carlo loops can address samples directly.
//
// On success writes a heap-allocated handle to `*out`; release it with
// [`sde_sample_free`].
//
// # Safety
//
// `field` must be a live handle; `out` must be a valid pointer to writable
// memory for one pointer.
enum SdeStatus sde_field_sample(const struct SdeField *field,
                                uint64_t seed,
                                uint64_t level,
                                uint64_t index,
                                struct SdeSample **out);

// Release a sample handle. Null is a no-op.
//
// # Safety
//
// `sample` must be null or a pointer obtained from [`sde_field_sample`]
// that has not been freed yet.
void sde_sample_free(struct SdeSample *sample);

// Evaluate the horizontal conductivity component `k11` at `(x, y)`.
//
// # Safety
//
// `sample` must be a live handle; `out` must point to writable memory for
// one `double`.
enum SdeStatus sde_sample_k11(const struct SdeSample *sample, double x, double y, double *out);

// Evaluate the vertical conductivity component `k22` at `(x, y)`.
//
// # Safety
//
// `sample` must be a live handle; `out` must point to writable memory for
// one `double`.
enum SdeStatus sde_sample_k22(const struct SdeSample *sample, double x, double y, double *out);

// Compute the optimized Robin parameter pair `(gamma_f, gamma_p)` for
// viscosity `mu_f`, conductivity determinant magnitude `det_kbar`,
// interface length `interface_length`, and mesh size `h`.
//
// # Safety
//
// `out_gamma_f` and `out_gamma_p` must each point to writable memory for
// one `double`.
enum SdeStatus sde_optimal_robin_parameters(double mu_f,
                                            double det_kbar,
                                            double interface_length,
                                            double h,
                                            double *out_gamma_f,
                                            double *out_gamma_p);

// Solve the built-in benchmark problem for an ensemble of `n_samples`
// anisotropic conductivity pairs `(k11[j], k22[j])` with the shared-matrix
// Robin iteration at mesh size `1 / h_denominator`.
//
// Exactly two matrix factorizations are performed regardless of
// `n_samples`. Robin parameters: when `use_optimal` is true the optimized
// pair is derived from the ensemble-mean conductivity and `gamma_f` /
// `gamma_p` are ignored; otherwise the given pair is used and must satisfy
// `0 < gamma_f <= gamma_p`. `tol` is the relative trace-increment stopping
// threshold and `max_iter` the iteration cap; pass `0` for either to keep
// its default (`1e-8`, `200`).
//
// Outputs (each may be null to skip it):
// * `out_iterations[j]` — iterations sample `j` needed to converge (the cap
//   if it never did);
// * `out_errors[5 * j ..][..5]` — relative errors of sample `j` against the
//   closed-form solution, in the order velocity `L2`, velocity `H1`,
//   pressure `L2` (absolute: the exact pressure is zero), head `L2`, head
//   `H1`;
// * `*out_all_converged` — whether every sample met `tol` within the cap.
//
// Hitting the cap is not an error (the flag reports it); the outputs then
// describe the last iterates.
//
// # Safety
//
// `k11` and `k22` must point to `n_samples` readable doubles. Non-null
// outputs must provide the capacities stated above.
enum SdeStatus sde_benchmark_solve(uint32_t h_denominator,
                                   const double *k11,
                                   const double *k22,
                                   size_t n_samples,
                                   bool use_optimal,
                                   double gamma_f,
                                   double gamma_p,
                                   double tol,
                                   size_t max_iter,
                                   uint32_t *out_iterations,
                                   double *out_errors,
                                   bool *out_all_converged);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SDE_H */
