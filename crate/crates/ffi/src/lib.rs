//! C ABI over the `mvsde` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_parse`
//! or `mvsde_run_*` functions and released by the matching `*_free`. Every
//! fallible call returns an [`MvsdeStatus`]; on failure the message is kept
//! per thread and read back with [`mvsde_last_error`]. Panics never unwind
//! into C: they are caught and reported as [`MvsdeStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mvsde::harness::{parse_scheme, run_convergence, ConvergenceReport, ExperimentConfig};
use mvsde::stepper::{initial_ensemble, simulate_from, Ensemble, Recording};
use mvsde::brownian::PathGrid;
use mvsde::verify::compute_g;
use mvsde::Error;

/// Result of every fallible call. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvsdeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    NonFinite = 4,
    NewtonFailure = 5,
    DimensionMismatch = 6,
    OutOfRange = 7,
    Io = 8,
    Panic = 9,
}

impl From<&Error> for MvsdeStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::NonFiniteCoefficient { .. } => MvsdeStatus::NonFinite,
            Error::InvalidParameter(_) | Error::SchemeMismatch(_) | Error::MissingHistory | Error::EmptyData => {
                MvsdeStatus::InvalidArgument
            }
            Error::DimensionMismatch(_) => MvsdeStatus::DimensionMismatch,
            Error::NewtonNonConvergence { .. } => MvsdeStatus::NewtonFailure,
            Error::ParticleOutOfRange { .. } => MvsdeStatus::OutOfRange,
            Error::Config { .. } => MvsdeStatus::Config,
            Error::Io(_) => MvsdeStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    // interior NULs cannot cross into C
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: MvsdeStatus, msg: impl Into<String>) -> MvsdeStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), MvsdeStatus>) -> MvsdeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MvsdeStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(MvsdeStatus::Panic, msg)
        }
    }
}

fn lib_err(e: Error) -> MvsdeStatus {
    let status = MvsdeStatus::from(&e);
    fail(status, e.to_string())
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), MvsdeStatus> {
    if p.is_null() {
        Err(fail(MvsdeStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `s` must be null or a NUL-terminated string.
unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, MvsdeStatus> {
    non_null(s, what)?;
    CStr::from_ptr(s).to_str().map_err(|_| fail(MvsdeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Experiment configuration handle.
pub struct MvsdeConfig {
    inner: ExperimentConfig,
}

/// Convergence report handle.
pub struct MvsdeConvergence {
    inner: ConvergenceReport,
}

/// Terminal particle states of one simulation.
pub struct MvsdeEnsemble {
    inner: Ensemble,
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next `mvsde_*` call on the same thread.
#[no_mangle]
pub extern "C" fn mvsde_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mvsde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a configuration with the desk-scale defaults.
///
/// # Safety
/// `out` must be null or valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn mvsde_config_new(out: *mut *mut MvsdeConfig) -> MvsdeStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(MvsdeConfig { inner: ExperimentConfig::default() }));
        Ok(())
    })
}

/// Parses configuration text (the same format as the CLI config files).
///
/// # Safety
/// `text` must be null or NUL-terminated; `out` must be null or valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn mvsde_config_parse(text: *const c_char, out: *mut *mut MvsdeConfig) -> MvsdeStatus {
    guard(|| {
        non_null(out, "out")?;
        let text = read_str(text, "text")?;
        let inner = ExperimentConfig::parse(text).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MvsdeConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn mvsde_config_set_seed(cfg: *mut MvsdeConfig, seed: u64) -> MvsdeStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        (*cfg).inner.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn mvsde_config_set_particles(cfg: *mut MvsdeConfig, n: usize) -> MvsdeStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        if n == 0 {
            return Err(fail(MvsdeStatus::InvalidArgument, "particle count must be positive"));
        }
        (*cfg).inner.particles = n;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvsde_config_free(cfg: *mut MvsdeConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the strong-error study described by `cfg`.
///
/// # Safety
/// `cfg` must be null or a live handle; `out` must be null or valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn mvsde_run_convergence(cfg: *const MvsdeConfig, out: *mut *mut MvsdeConvergence) -> MvsdeStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        non_null(out, "out")?;
        let inner = run_convergence(&(*cfg).inner).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MvsdeConvergence { inner }));
        Ok(())
    })
}

/// Number of schemes in the report; 0 for a null handle.
///
/// # Safety
/// `rep` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvsde_convergence_scheme_count(rep: *const MvsdeConvergence) -> usize {
    rep.as_ref().map_or(0, |r| r.inner.schemes.len())
}

/// Number of step sizes per scheme; 0 for a null handle.
///
/// # Safety
/// `rep` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvsde_convergence_row_count(rep: *const MvsdeConvergence) -> usize {
    rep.as_ref().and_then(|r| r.inner.schemes.first()).map_or(0, |s| s.rows.len())
}

/// Fitted slope of scheme `scheme`; NaN when too few rows were usable.
///
/// # Safety
/// `rep` must be null or a live handle; `slope` must be null or valid for a write.
#[no_mangle]
pub unsafe extern "C" fn mvsde_convergence_slope(rep: *const MvsdeConvergence, scheme: usize, slope: *mut f64) -> MvsdeStatus {
    guard(|| {
        non_null(rep, "report")?;
        non_null(slope, "slope")?;
        let rep = &*rep;
        let s = rep
            .inner
            .schemes
            .get(scheme)
            .ok_or_else(|| fail(MvsdeStatus::OutOfRange, format!("scheme index {scheme} out of range")))?;
        *slope = s.fit.map_or(f64::NAN, |f| f.slope);
        Ok(())
    })
}

/// Row `row` (descending `h`) of scheme `scheme`. `rmse` is NaN for a diverged run.
///
/// # Safety
/// `rep` must be null or a live handle; `h` and `rmse` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mvsde_convergence_row(
    rep: *const MvsdeConvergence,
    scheme: usize,
    row: usize,
    h: *mut f64,
    rmse: *mut f64,
) -> MvsdeStatus {
    guard(|| {
        non_null(rep, "report")?;
        non_null(h, "h")?;
        non_null(rmse, "rmse")?;
        let rep = &*rep;
        let r = rep
            .inner
            .schemes
            .get(scheme)
            .and_then(|s| s.rows.get(row))
            .ok_or_else(|| fail(MvsdeStatus::OutOfRange, format!("row ({scheme}, {row}) out of range")))?;
        *h = r.h;
        *rmse = r.rmse;
        Ok(())
    })
}

/// Copies the scheme label into `buf` (NUL-terminated, truncated to `len`).
/// Returns the full label length excluding the NUL, or 0 for bad arguments.
///
/// # Safety
/// `rep` must be null or a live handle; `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mvsde_convergence_scheme_label(
    rep: *const MvsdeConvergence,
    scheme: usize,
    buf: *mut c_char,
    len: usize,
) -> usize {
    let Some(s) = rep.as_ref().and_then(|r| r.inner.schemes.get(scheme)) else {
        return 0;
    };
    let bytes = s.scheme.as_bytes();
    if !buf.is_null() && len > 0 {
        let n = bytes.len().min(len - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
        *buf.add(n) = 0;
    }
    bytes.len()
}

/// # Safety
/// `rep` must be null or a handle that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvsde_convergence_free(rep: *mut MvsdeConvergence) {
    if !rep.is_null() {
        drop(Box::from_raw(rep));
    }
}

/// Simulates the configured model with one scheme (a config scheme name such
/// as `"me"` or `"te1"`) at step `h` up to the configured horizon.
///
/// # Safety
/// `cfg` must be null or a live handle; `scheme` null or NUL-terminated; `out`
/// null or valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn mvsde_simulate(
    cfg: *const MvsdeConfig,
    scheme: *const c_char,
    h: f64,
    out: *mut *mut MvsdeEnsemble,
) -> MvsdeStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        non_null(out, "out")?;
        let name = read_str(scheme, "scheme")?;
        let cfg = &(*cfg).inner;
        let model = cfg.model.build().map_err(lib_err)?;
        let scheme = parse_scheme(name, model.rho(), cfg.newton).map_err(lib_err)?;
        if !(h > 0.0 && h < 1.0) {
            return Err(fail(MvsdeStatus::InvalidArgument, format!("step size must lie in (0, 1), got {h}")));
        }
        let steps = (cfg.horizon / h).round() as usize;
        if steps == 0 || ((steps as f64) * h - cfg.horizon).abs() > 1e-9 * cfg.horizon {
            return Err(fail(MvsdeStatus::InvalidArgument, format!("h = {h} does not divide T = {}", cfg.horizon)));
        }
        let grid = PathGrid::generate(cfg.seed, steps, cfg.horizon, cfg.particles, model.noise_dim()).map_err(lib_err)?;
        let init = initial_ensemble(&model, cfg.seed, cfg.particles);
        let traj = simulate_from(init, &model, &scheme, &grid, &Recording::default()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MvsdeEnsemble { inner: traj.final_state }));
        Ok(())
    })
}

/// Particle count; 0 for a null handle.
///
/// # Safety
/// `ens` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvsde_ensemble_len(ens: *const MvsdeEnsemble) -> usize {
    ens.as_ref().map_or(0, |e| e.inner.len())
}

/// State dimension; 0 for a null handle.
///
/// # Safety
/// `ens` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvsde_ensemble_dim(ens: *const MvsdeEnsemble) -> usize {
    ens.as_ref().map_or(0, |e| e.inner.dim())
}

/// 1 if the run stopped at a non-finite state, 0 otherwise.
///
/// # Safety
/// `ens` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvsde_ensemble_is_diverged(ens: *const MvsdeEnsemble) -> i32 {
    ens.as_ref().map_or(0, |e| i32::from(e.inner.is_diverged()))
}

/// Copies the `len · dim` row-major states into `buf`, which holds `cap` values.
///
/// # Safety
/// `ens` must be null or a live handle; `buf` must be null or valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn mvsde_ensemble_copy(ens: *const MvsdeEnsemble, buf: *mut f64, cap: usize) -> MvsdeStatus {
    guard(|| {
        non_null(ens, "ensemble")?;
        non_null(buf, "buf")?;
        let states = (*ens).inner.states();
        if cap < states.len() {
            return Err(fail(MvsdeStatus::OutOfRange, format!("buffer holds {cap} values, need {}", states.len())));
        }
        ptr::copy_nonoverlapping(states.as_ptr(), buf, states.len());
        Ok(())
    })
}

/// # Safety
/// `ens` must be null or a handle that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvsde_ensemble_free(ens: *mut MvsdeEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

/// Moment-bound constant `max{6ρ, ((2ρ+1) r2 − 1) / r1}`.
///
/// # Safety
/// `out` must be null or valid for a write.
#[no_mangle]
pub unsafe extern "C" fn mvsde_compute_g(rho: f64, r1: f64, r2: f64, out: *mut f64) -> MvsdeStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = compute_g(rho, r1, r2).map_err(lib_err)?;
        Ok(())
    })
}
