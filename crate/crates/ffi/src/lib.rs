//! C ABI over the `ldpnn` engine.
//!
//! Every fallible function returns an [`LdpnnStatus`]; on failure the
//! message is available from [`ldpnn_last_error_message`] on the same thread.
//! Solvers and datasets are opaque handles released with their `_free`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use ldpnn::gp::{gp_posterior_mean_var, Dataset};
use ldpnn::kernel::{ExtReal, InputSet, KernelMatrix};
use ldpnn::linear::{output_rate_linear, LinearConfig};
use ldpnn::mc::{sample_prior_outputs, SamplerConfig};
use ldpnn::nngp::{ActivationKind, NetworkSpec};
use ldpnn::rate::{map_predict, OptimizerSettings, RateEvaluation, RateSolver};
use ldpnn::LdpError;
use nalgebra::{DMatrix, DVector};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LdpnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NotConverged = 4,
    Numerical = 5,
    Sampler = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LdpnnActivation {
    Relu = 0,
    Tanh = 1,
    Linear = 2,
}

/// Network description; `linear_a` is read only for the linear activation.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LdpnnNetwork {
    pub depth: u32,
    pub activation: LdpnnActivation,
    pub linear_a: f64,
    pub d_in: usize,
    pub bias_variance: f64,
}

/// One rate evaluation. `is_infinite` is 1 when the rate is infinite, in
/// which case `value` is `INFINITY`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LdpnnRate {
    pub value: f64,
    pub is_infinite: i32,
    pub converged: i32,
    pub kernel_gap: f64,
    pub outer_grad_norm: f64,
}

/// Opaque rate solver bound to one input set.
pub struct LdpnnSolver {
    inner: RateSolver,
}

/// Opaque training set plus test inputs.
pub struct LdpnnDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &LdpError) -> LdpnnStatus {
    match e {
        LdpError::InvalidArgument(_) | LdpError::NonFiniteInput(_) => LdpnnStatus::InvalidArgument,
        LdpError::DimensionMismatch(_) => LdpnnStatus::DimensionMismatch,
        LdpError::InnerNotConverged(_) => LdpnnStatus::NotConverged,
        LdpError::NonFiniteGradient { .. } => LdpnnStatus::Sampler,
        _ => LdpnnStatus::Numerical,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (LdpnnStatus, String)>) -> LdpnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LdpnnStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LdpnnStatus::Panic
        }
    }
}

type FfiResult<T> = Result<T, (LdpnnStatus, String)>;

fn lift<T>(r: ldpnn::Result<T>) -> FfiResult<T> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(name: &str) -> (LdpnnStatus, String) {
    (LdpnnStatus::NullPointer, format!("`{name}` is null"))
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn read<'a>(p: *const f64, len: usize, name: &str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

fn rows(flat: &[f64], d_in: usize) -> FfiResult<Vec<Vec<f64>>> {
    if d_in == 0 || flat.len() % d_in != 0 {
        return Err((LdpnnStatus::DimensionMismatch, "input length is not a multiple of d_in".into()));
    }
    Ok(flat.chunks(d_in).map(|c| c.to_vec()).collect())
}

fn spec_of(net: &LdpnnNetwork) -> FfiResult<NetworkSpec> {
    let act = match net.activation {
        LdpnnActivation::Relu => ActivationKind::Relu,
        LdpnnActivation::Tanh => ActivationKind::Tanh,
        LdpnnActivation::Linear => ActivationKind::Linear { a: net.linear_a },
    };
    lift(NetworkSpec::new(net.depth as usize, act, net.d_in, net.bias_variance))
}

fn write_rate(ev: &RateEvaluation, out: *mut LdpnnRate) {
    let (value, inf) = match ev.value {
        ExtReal::Finite(v) => (v, 0),
        ExtReal::Infinite => (f64::INFINITY, 1),
    };
    // SAFETY: callers check `out` for null first.
    unsafe {
        *out = LdpnnRate {
            value,
            is_infinite: inf,
            converged: ev.converged as i32,
            kernel_gap: ev.kernel_gap_vs_nngp,
            outer_grad_norm: ev.outer_grad_norm_final,
        };
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ldpnn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn ldpnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Creates a solver on `m` inputs stored row-major in `x` (`m * d_in` values)
/// with default optimizer settings.
///
/// # Safety
/// `net` and `out` must be valid pointers and `x` must hold `m * net.d_in`
/// values.
#[no_mangle]
pub unsafe extern "C" fn ldpnn_solver_new(
    net: *const LdpnnNetwork,
    x: *const f64,
    m: usize,
    out: *mut *mut LdpnnSolver,
) -> LdpnnStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = spec_of(net)?;
        let pts = rows(read(x, m * net.d_in, "x")?, net.d_in)?;
        let input = lift(InputSet::new(pts, (0..m).collect(), vec![]))?;
        let solver = lift(RateSolver::new(&input, &spec, &OptimizerSettings::default()))?;
        *out = Box::into_raw(Box::new(LdpnnSolver { inner: solver }));
        Ok(())
    })
}

/// # Safety
/// `solver` must be null or a handle from [`ldpnn_solver_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ldpnn_solver_free(solver: *mut LdpnnSolver) {
    if !solver.is_null() {
        drop(Box::from_raw(solver));
    }
}

/// Prior output rate of the output vector `h` (one value per input).
///
/// # Safety
/// `solver` must be a live handle, `h` must hold `m` values and `out` must
/// be valid.
#[no_mangle]
pub unsafe extern "C" fn ldpnn_solver_prior_rate(
    solver: *mut LdpnnSolver,
    h: *const f64,
    m: usize,
    out: *mut LdpnnRate,
) -> LdpnnStatus {
    guard(|| {
        let s = solver.as_mut().ok_or_else(|| null("solver"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let h = DVector::from_column_slice(read(h, m, "h")?);
        let ev = lift(s.inner.prior_rate(&h))?;
        write_rate(&ev, out);
        Ok(())
    })
}

/// Kernel rate of hidden layer `layer` (1-based) at the `m x m` row-major
/// kernel `kappa`.
///
/// # Safety
/// `solver` must be a live handle, `kappa` must hold `m * m` values and
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ldpnn_solver_kernel_rate(
    solver: *mut LdpnnSolver,
    kappa: *const f64,
    m: usize,
    layer: u32,
    out: *mut LdpnnRate,
) -> LdpnnStatus {
    guard(|| {
        let s = solver.as_mut().ok_or_else(|| null("solver"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let k = lift(KernelMatrix::new(DMatrix::from_row_slice(m, m, read(kappa, m * m, "kappa")?)))?;
        let ev = lift(s.inner.kernel_rate(&k, layer as usize))?;
        write_rate(&ev, out);
        Ok(())
    })
}

/// Builds a dataset from `n_train` training pairs and `n_test` test inputs,
/// all row-major with `d_in` columns.
///
/// # Safety
/// Array arguments must hold the stated number of values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ldpnn_dataset_new(
    train_x: *const f64,
    train_y: *const f64,
    n_train: usize,
    test_x: *const f64,
    n_test: usize,
    d_in: usize,
    out: *mut *mut LdpnnDataset,
) -> LdpnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let tx = rows(read(train_x, n_train * d_in, "train_x")?, d_in)?;
        let ty = read(train_y, n_train, "train_y")?;
        let sx = rows(read(test_x, n_test * d_in, "test_x")?, d_in)?;
        let d = lift(Dataset::from_points(&tx, ty, &sx))?;
        *out = Box::into_raw(Box::new(LdpnnDataset { inner: d }));
        Ok(())
    })
}

/// Heaviside targets on `{-3, ..., 2}` plus `n_test` scalar test inputs.
///
/// # Safety
/// `test_x` must hold `n_test` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ldpnn_dataset_heaviside6(
    test_x: *const f64,
    n_test: usize,
    out: *mut *mut LdpnnDataset,
) -> LdpnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = lift(Dataset::heaviside6(read(test_x, n_test, "test_x")?))?;
        *out = Box::into_raw(Box::new(LdpnnDataset { inner: d }));
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn ldpnn_dataset_free(data: *mut LdpnnDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// LDP-MAP prediction at `x_test` (`d_in` values, one of the dataset inputs).
///
/// # Safety
/// Pointers must be valid; `x_test` must hold `net.d_in` values.
#[no_mangle]
pub unsafe extern "C" fn ldpnn_map_predict(
    net: *const LdpnnNetwork,
    data: *const LdpnnDataset,
    x_test: *const f64,
    y_out: *mut f64,
) -> LdpnnStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        let data = data.as_ref().ok_or_else(|| null("data"))?;
        if y_out.is_null() {
            return Err(null("y_out"));
        }
        let spec = spec_of(net)?;
        let x = read(x_test, net.d_in, "x_test")?;
        let p = lift(map_predict(x, &data.inner, &spec, &OptimizerSettings::default()))?;
        *y_out = p.y_star;
        Ok(())
    })
}

/// Fixed-kernel regression mean and variance at `x` for an `m x m`
/// row-major kernel over the dataset inputs.
///
/// # Safety
/// Pointers must be valid; `kappa` holds `m * m` values and `x` holds the
/// dataset input dimension.
#[no_mangle]
pub unsafe extern "C" fn ldpnn_gp_posterior(
    kappa: *const f64,
    m: usize,
    data: *const LdpnnDataset,
    x: *const f64,
    mean_out: *mut f64,
    var_out: *mut f64,
) -> LdpnnStatus {
    guard(|| {
        let data = data.as_ref().ok_or_else(|| null("data"))?;
        if mean_out.is_null() || var_out.is_null() {
            return Err(null("mean_out/var_out"));
        }
        let k = lift(KernelMatrix::new(DMatrix::from_row_slice(m, m, read(kappa, m * m, "kappa")?)))?;
        let x = read(x, data.inner.x().d_in(), "x")?;
        let (mean, var) = lift(gp_posterior_mean_var(&k, &data.inner, x))?;
        *mean_out = mean;
        *var_out = var;
        Ok(())
    })
}

/// Closed-form output rate of the bias-free linear chain with `layers`
/// hidden layers.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ldpnn_output_rate_linear(
    y: f64,
    a: f64,
    kappa0: f64,
    layers: u32,
    out: *mut f64,
) -> LdpnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = lift(LinearConfig::new(a, kappa0, layers as usize))?;
        *out = lift(output_rate_linear(y, &cfg))?;
        Ok(())
    })
}

/// Draws `n_samples` values of `h(x) / sqrt(width)` into `out`.
///
/// # Safety
/// `net` must be valid, `x` must hold `net.d_in` values and `out` must have
/// room for `n_samples` values.
#[no_mangle]
pub unsafe extern "C" fn ldpnn_sample_prior_outputs(
    net: *const LdpnnNetwork,
    width: usize,
    n_samples: u64,
    seed: u64,
    x: *const f64,
    out: *mut f64,
) -> LdpnnStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = spec_of(net)?;
        let cfg = SamplerConfig {
            width,
            n_samples,
            seed,
            batch: 100_000,
        };
        let x = read(x, net.d_in, "x")?;
        let samples = lift(sample_prior_outputs(&cfg, &spec, x))?;
        slice::from_raw_parts_mut(out, samples.len()).copy_from_slice(&samples);
        Ok(())
    })
}
