//! C ABI for the ensemble Stokes–Darcy domain-decomposition solver.
//!
//! The surface is deliberately small: draw conductivity realizations from the
//! truncated Karhunen–Loève field, compute the optimized Robin parameter
//! pair, and run the shared-coefficient ensemble iteration on the built-in
//! benchmark problem, returning per-sample iteration counts and error norms.
//!
//! # Conventions
//!
//! * Every fallible function returns an [`SdeStatus`]; `SDE_STATUS_OK` (0)
//!   means success and anything else is a failure with no outputs written.
//! * On failure a human-readable message is stored in thread-local storage
//!   and can be read with [`sde_last_error`]. The pointer stays valid until
//!   the next failing call on the same thread.
//! * Handles ([`SdeField`], [`SdeSample`]) are created by `*_new`/`*_sample`
//!   constructors and must be released with the matching `*_free`. Passing
//!   null to a `*_free` is a no-op; passing null anywhere else yields
//!   `SDE_STATUS_NULL_ARGUMENT`.
//! * No function ever unwinds across the boundary: panics are caught and
//!   reported as `SDE_STATUS_PANIC`.
//!
//! The generated header lives in `include/sde.h` and is kept in sync by the
//! build script.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use sde_core::ddm::{ensemble_ddm_solve, optimal_robin_parameters, DdmConfig};
use sde_core::fem::FeSpaces;
use sde_core::mesh::build_coupled_meshes;
use sde_core::oracle::{solution_errors, test1_case};
use sde_core::randfield::{sample_conductivity, ConductivitySample, RandomFieldParams};
use sde_core::Error;

/// Status code returned by every fallible entry point.
///
/// `Ok` is zero so that `if (status) { ... }` reads as an error check in C.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdeStatus {
    /// The call succeeded and all requested outputs were written.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument failed validation; see [`sde_last_error`].
    InvalidInput = 2,
    /// A linear system factorization failed (singular or ill-posed matrix).
    Singular = 3,
    /// An iteration diverged or exceeded its cap in a context where partial
    /// results cannot be returned.
    Diverged = 4,
    /// Random-field sampling failed.
    Sampling = 5,
    /// A configuration value was rejected.
    Config = 6,
    /// An input/output operation failed.
    Io = 7,
    /// A panic was caught at the boundary; the library state is still sound
    /// but the call did nothing.
    Panic = 8,
}

fn status_of(err: &Error) -> SdeStatus {
    match err {
        Error::InvalidInput(_) => SdeStatus::InvalidInput,
        Error::Singular(_) => SdeStatus::Singular,
        Error::Diverged { .. } => SdeStatus::Diverged,
        Error::Sampling(_) => SdeStatus::Sampling,
        Error::Config(_) => SdeStatus::Config,
        Error::Io(_) => SdeStatus::Io,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    // Interior NULs cannot come from our own error messages, but never panic
    // while reporting an error.
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn fail(status: SdeStatus, msg: &str) -> SdeStatus {
    set_last_error(msg);
    status
}

fn fail_with(err: &Error) -> SdeStatus {
    fail(status_of(err), &err.to_string())
}

/// Run `body`, converting panics into `SDE_STATUS_PANIC` instead of
/// unwinding into the caller.
fn guarded(body: impl FnOnce() -> SdeStatus) -> SdeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(SdeStatus::Panic, &format!("internal panic: {msg}"))
        }
    }
}

/// Opaque handle to the truncated Karhunen–Loève conductivity field
/// definition (mean, noise amplitude, correlation length, mode count).
pub struct SdeField {
    params: RandomFieldParams,
}

/// Opaque handle to one drawn conductivity realization, evaluable at any
/// point of the porous domain.
pub struct SdeSample {
    sample: ConductivitySample,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent failure on the calling thread, as a
/// NUL-terminated string. Empty until the first failure. The pointer is
/// owned by the library and stays valid until the next failing call on the
/// same thread.
#[no_mangle]
pub extern "C" fn sde_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Create a conductivity field definition.
///
/// `mean` is the constant mean conductivity, `sigma` the noise amplitude,
/// `corr_len` the physical correlation length, and `n_frequencies` the
/// number of retained frequencies (the expansion then carries
/// `2 * n_frequencies + 1` uniform random coefficients).
///
/// On success writes a heap-allocated handle to `*out`; release it with
/// [`sde_field_free`].
///
/// # Safety
///
/// `out` must be a valid pointer to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn sde_field_new(
    mean: f64,
    sigma: f64,
    corr_len: f64,
    n_frequencies: usize,
    out: *mut *mut SdeField,
) -> SdeStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SdeStatus::NullArgument, "out is null");
        }
        for (name, v, lo) in [("mean", mean, true), ("sigma", sigma, false), ("corr_len", corr_len, true)] {
            if !v.is_finite() || v < 0.0 || (lo && v == 0.0) {
                return fail(
                    SdeStatus::InvalidInput,
                    &format!("{name} must be finite and {}, got {v}", if lo { "positive" } else { "non-negative" }),
                );
            }
        }
        if n_frequencies == 0 {
            return fail(SdeStatus::InvalidInput, "n_frequencies must be at least 1");
        }
        let params = RandomFieldParams {
            mean,
            sigma,
            corr_len,
            n_frequencies,
        };
        unsafe { *out = Box::into_raw(Box::new(SdeField { params })) };
        SdeStatus::Ok
    })
}

/// Create the default field definition (mean 1, amplitude 0.15, correlation
/// length 0.25, three frequencies).
///
/// # Safety
///
/// `out` must be a valid pointer to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn sde_field_default(out: *mut *mut SdeField) -> SdeStatus {
    let p = RandomFieldParams::default();
    unsafe { sde_field_new(p.mean, p.sigma, p.corr_len, p.n_frequencies, out) }
}

/// Release a field handle. Null is a no-op.
///
/// # Safety
///
/// `field` must be null or a pointer obtained from [`sde_field_new`] /
/// [`sde_field_default`] that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn sde_field_free(field: *mut SdeField) {
    if !field.is_null() {
        drop(unsafe { Box::from_raw(field) });
    }
}

/// Draw one conductivity realization from the stream identified by
/// `(seed, level, index)`. The draw is deterministic: the same triple always
/// yields the same realization, and distinct triples yield independent
/// streams, so Monte Carlo loops can address samples directly.
///
/// On success writes a heap-allocated handle to `*out`; release it with
/// [`sde_sample_free`].
///
/// # Safety
///
/// `field` must be a live handle; `out` must be a valid pointer to writable
/// memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn sde_field_sample(
    field: *const SdeField,
    seed: u64,
    level: u64,
    index: u64,
    out: *mut *mut SdeSample,
) -> SdeStatus {
    guarded(|| {
        if field.is_null() || out.is_null() {
            return fail(SdeStatus::NullArgument, "field and out must be non-null");
        }
        let params = unsafe { &(*field).params };
        let sample = sample_conductivity(params, seed, level, index);
        unsafe { *out = Box::into_raw(Box::new(SdeSample { sample })) };
        SdeStatus::Ok
    })
}

/// Release a sample handle. Null is a no-op.
///
/// # Safety
///
/// `sample` must be null or a pointer obtained from [`sde_field_sample`]
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn sde_sample_free(sample: *mut SdeSample) {
    if !sample.is_null() {
        drop(unsafe { Box::from_raw(sample) });
    }
}

fn eval_sample(
    sample: *const SdeSample,
    x: f64,
    y: f64,
    out: *mut f64,
    f: impl Fn(&ConductivitySample, [f64; 2]) -> f64,
) -> SdeStatus {
    guarded(|| {
        if sample.is_null() || out.is_null() {
            return fail(SdeStatus::NullArgument, "sample and out must be non-null");
        }
        if !x.is_finite() || !y.is_finite() {
            return fail(SdeStatus::InvalidInput, "evaluation point must be finite");
        }
        let v = f(unsafe { &(*sample).sample }, [x, y]);
        unsafe { *out = v };
        SdeStatus::Ok
    })
}

/// Evaluate the horizontal conductivity component `k11` at `(x, y)`.
///
/// # Safety
///
/// `sample` must be a live handle; `out` must point to writable memory for
/// one `double`.
#[no_mangle]
pub unsafe extern "C" fn sde_sample_k11(
    sample: *const SdeSample,
    x: f64,
    y: f64,
    out: *mut f64,
) -> SdeStatus {
    eval_sample(sample, x, y, out, |s, p| s.k11(p))
}

/// Evaluate the vertical conductivity component `k22` at `(x, y)`.
///
/// # Safety
///
/// `sample` must be a live handle; `out` must point to writable memory for
/// one `double`.
#[no_mangle]
pub unsafe extern "C" fn sde_sample_k22(
    sample: *const SdeSample,
    x: f64,
    y: f64,
    out: *mut f64,
) -> SdeStatus {
    eval_sample(sample, x, y, out, |s, p| s.k22(p))
}

/// Compute the optimized Robin parameter pair `(gamma_f, gamma_p)` for
/// viscosity `mu_f`, conductivity determinant magnitude `det_kbar`,
/// interface length `interface_length`, and mesh size `h`.
///
/// # Safety
///
/// `out_gamma_f` and `out_gamma_p` must each point to writable memory for
/// one `double`.
#[no_mangle]
pub unsafe extern "C" fn sde_optimal_robin_parameters(
    mu_f: f64,
    det_kbar: f64,
    interface_length: f64,
    h: f64,
    out_gamma_f: *mut f64,
    out_gamma_p: *mut f64,
) -> SdeStatus {
    guarded(|| {
        if out_gamma_f.is_null() || out_gamma_p.is_null() {
            return fail(SdeStatus::NullArgument, "output pointers must be non-null");
        }
        match optimal_robin_parameters(mu_f, det_kbar, interface_length, h) {
            Ok((gf, gp)) => {
                unsafe {
                    *out_gamma_f = gf;
                    *out_gamma_p = gp;
                }
                SdeStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Solve the built-in benchmark problem for an ensemble of `n_samples`
/// anisotropic conductivity pairs `(k11[j], k22[j])` with the shared-matrix
/// Robin iteration at mesh size `1 / h_denominator`.
///
/// Exactly two matrix factorizations are performed regardless of
/// `n_samples`. Robin parameters: when `use_optimal` is true the optimized
/// pair is derived from the ensemble-mean conductivity and `gamma_f` /
/// `gamma_p` are ignored; otherwise the given pair is used and must satisfy
/// `0 < gamma_f <= gamma_p`. `tol` is the relative trace-increment stopping
/// threshold and `max_iter` the iteration cap; pass `0` for either to keep
/// its default (`1e-8`, `200`).
///
/// Outputs (each may be null to skip it):
/// * `out_iterations[j]` — iterations sample `j` needed to converge (the cap
///   if it never did);
/// * `out_errors[5 * j ..][..5]` — relative errors of sample `j` against the
///   closed-form solution, in the order velocity `L2`, velocity `H1`,
///   pressure `L2` (absolute: the exact pressure is zero), head `L2`, head
///   `H1`;
/// * `*out_all_converged` — whether every sample met `tol` within the cap.
///
/// Hitting the cap is not an error (the flag reports it); the outputs then
/// describe the last iterates.
///
/// # Safety
///
/// `k11` and `k22` must point to `n_samples` readable doubles. Non-null
/// outputs must provide the capacities stated above.
#[no_mangle]
pub unsafe extern "C" fn sde_benchmark_solve(
    h_denominator: u32,
    k11: *const f64,
    k22: *const f64,
    n_samples: usize,
    use_optimal: bool,
    gamma_f: f64,
    gamma_p: f64,
    tol: f64,
    max_iter: usize,
    out_iterations: *mut u32,
    out_errors: *mut f64,
    out_all_converged: *mut bool,
) -> SdeStatus {
    guarded(|| {
        if k11.is_null() || k22.is_null() {
            return fail(SdeStatus::NullArgument, "k11 and k22 must be non-null");
        }
        if n_samples == 0 {
            return fail(SdeStatus::InvalidInput, "n_samples must be at least 1");
        }
        if h_denominator == 0 {
            return fail(SdeStatus::InvalidInput, "h_denominator must be at least 1");
        }
        let k11s = unsafe { std::slice::from_raw_parts(k11, n_samples) };
        let k22s = unsafe { std::slice::from_raw_parts(k22, n_samples) };

        let mesh = match build_coupled_meshes(1.0 / f64::from(h_denominator)) {
            Ok(m) => m,
            Err(e) => return fail_with(&e),
        };
        let spaces = FeSpaces::build(&mesh);

        let mut cases = Vec::with_capacity(n_samples);
        for (j, (&a, &b)) in k11s.iter().zip(k22s).enumerate() {
            match test1_case(a, b) {
                Ok(c) => cases.push(c),
                Err(e) => {
                    return fail(
                        status_of(&e),
                        &format!("sample {j}: {e}"),
                    )
                }
            }
        }

        let mut config = if use_optimal {
            DdmConfig::optimal()
        } else {
            DdmConfig::fixed(gamma_f, gamma_p)
        };
        if tol != 0.0 {
            config.tol = tol;
        }
        if max_iter != 0 {
            config.max_iter = max_iter;
        }

        let (fields, history) = match ensemble_ddm_solve(&mesh, &spaces, &cases, &config) {
            Ok(r) => r,
            Err(e) => return fail_with(&e),
        };

        if !out_iterations.is_null() {
            let counts = history.iteration_counts();
            let out = unsafe { std::slice::from_raw_parts_mut(out_iterations, n_samples) };
            for (dst, &n) in out.iter_mut().zip(&counts) {
                *dst = u32::try_from(n).unwrap_or(u32::MAX);
            }
        }
        if !out_errors.is_null() {
            let out = unsafe { std::slice::from_raw_parts_mut(out_errors, 5 * n_samples) };
            for (j, (sol, case)) in fields.iter().zip(&cases).enumerate() {
                match solution_errors(&mesh, &spaces, sol, case) {
                    Ok(cols) => out[5 * j..5 * j + 5].copy_from_slice(&cols),
                    Err(e) => return fail_with(&e),
                }
            }
        }
        if !out_all_converged.is_null() {
            unsafe { *out_all_converged = history.all_converged };
        }
        SdeStatus::Ok
    })
}
