//! C interface to `crf-core`.
//!
//! Datasets and models are opaque heap handles released with their `_free`
//! functions. Every fallible call returns a [`CrfStatus`]; on failure the
//! message is available from [`crf_last_error`] on the same thread. Strings
//! returned through out-parameters are owned by the caller and released
//! with [`crf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use crf_core::cli::{self, CliError, Format, RunConfig};
use crf_core::crf::CrfModel as Model;
use crf_core::data::{self, ColumnRoles, Dataset, SyntheticSpec, TauForm};
use crf_core::metrics;
use crf_core::rules::{ReportOptions, DEFAULT_MAX_TERMS};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrfStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Data = 3,
    Fit = 4,
    Panic = 5,
    LengthMismatch = 6,
}

/// Opaque dataset handle.
pub struct CrfDataset {
    inner: Dataset,
}

/// Opaque fitted-model handle.
pub struct CrfModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

type Failure = (CrfStatus, String);

fn from_cli(e: CliError) -> Failure {
    let status = match e.exit_code() {
        2 => CrfStatus::Config,
        3 => CrfStatus::Data,
        _ => CrfStatus::Fit,
    };
    (status, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CrfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CrfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CrfStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    (CrfStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (CrfStatus::Config, format!("`{what}` is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn crf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a CSV dataset with the default column roles.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn crf_dataset_load_csv(path: *const c_char, out: *mut *mut CrfDataset) -> CrfStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let ds = data::load_csv(path, &ColumnRoles::default(), None).map_err(|e| (CrfStatus::Data, e.to_string()))?;
        put(out, CrfDataset { inner: ds }, "out")
    })
}

/// Draws a synthetic dataset. `tau_form` is `constant:C` or
/// `step:FEATURE:LOW:HIGH`.
///
/// # Safety
/// `tau_form` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn crf_dataset_simulate(
    n: usize,
    d_num: usize,
    d_cat: usize,
    seed: u64,
    tau_form: *const c_char,
    confounding_strength: f64,
    out: *mut *mut CrfDataset,
) -> CrfStatus {
    guard(|| {
        let tau_form: TauForm = str_arg(tau_form, "tau_form")?.parse().map_err(|e| (CrfStatus::Config, e))?;
        let spec = SyntheticSpec { n, d_num, d_cat, seed, tau_form, confounding_strength };
        let ds = data::simulate(&spec).map_err(|e| (CrfStatus::Config, e.to_string()))?;
        put(out, CrfDataset { inner: ds }, "out")
    })
}

/// Row count, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn crf_dataset_rows(ds: *const CrfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.n())
}

/// Copies the true effects `mu1 - mu0` into `out` (length `len`).
///
/// # Safety
/// `ds` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn crf_dataset_true_effects(ds: *const CrfDataset, out: *mut f64, len: usize) -> CrfStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        let tau =
            ds.inner.true_effects().ok_or_else(|| (CrfStatus::Data, "dataset has no mu0/mu1 columns".to_string()))?;
        copy_out(&tau, out, len)
    })
}

unsafe fn copy_out(values: &[f64], out: *mut f64, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    if len != values.len() {
        return Err((CrfStatus::LengthMismatch, format!("buffer holds {len} values, need {}", values.len())));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, len);
    Ok(())
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn crf_dataset_free(ds: *mut CrfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fits a model. `config_json` is a run configuration document as
/// accepted by the `crf` command, or null for the defaults.
///
/// # Safety
/// `ds` must be a live handle; `config_json` null or NUL-terminated;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn crf_model_fit(
    ds: *const CrfDataset,
    config_json: *const c_char,
    out: *mut *mut CrfModel,
) -> CrfStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        let cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_json(str_arg(config_json, "config_json")?).map_err(from_cli)?
        };
        cfg.validate().map_err(from_cli)?;
        let folds = cfg.prune.then_some(cfg.folds);
        let model =
            crf_core::fit_crf_ct(&ds.inner, &cfg.crf, &cfg.final_params, folds).map_err(|e| from_cli(e.into()))?;
        put(out, CrfModel { inner: model }, "out")
    })
}

/// Writes a model file.
///
/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn crf_model_save(model: *const CrfModel, path: *const c_char) -> CrfStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        cli::save_model(&model.inner, &path).map_err(from_cli)
    })
}

/// Reads a model file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn crf_model_load(path: *const c_char, out: *mut *mut CrfModel) -> CrfStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let model = cli::load_model(&path).map_err(from_cli)?;
        put(out, CrfModel { inner: model }, "out")
    })
}

/// Predicts effects for every row of `ds` into `out` (length `len`).
///
/// # Safety
/// `model` and `ds` must be live handles; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn crf_model_predict(
    model: *const CrfModel,
    ds: *const CrfDataset,
    out: *mut f64,
    len: usize,
) -> CrfStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let ds = handle(ds, "ds")?;
        let x = ds.inner.x.conform_to(&model.inner.raw_schema).map_err(|e| (CrfStatus::Data, e.to_string()))?;
        let tau = model.inner.predict(&x).map_err(|e| from_cli(e.into()))?;
        copy_out(&tau, out, len)
    })
}

/// Rule report as a JSON document. `top_k = 0` keeps every rule.
///
/// # Safety
/// `model` must be a live handle; `out` writable. Release the string with
/// `crf_string_free`.
#[no_mangle]
pub unsafe extern "C" fn crf_model_rules_json(
    model: *const CrfModel,
    top_k: usize,
    minimize: bool,
    out: *mut *mut c_char,
) -> CrfStatus {
    guard(|| {
        let model = handle(model, "model")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let opts = ReportOptions { minimize, top_k: (top_k > 0).then_some(top_k), max_terms: DEFAULT_MAX_TERMS };
        let json = cli::rules_output(&model.inner, &opts, Format::Json).map_err(from_cli)?;
        *out = CString::new(json).map_err(|e| (CrfStatus::Fit, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn crf_model_free(model: *mut CrfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn crf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Root mean squared error between two effect vectors of length `len`.
///
/// # Safety
/// `tau_hat` and `tau` must each hold `len` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn crf_pehe(tau_hat: *const f64, tau: *const f64, len: usize, out: *mut f64) -> CrfStatus {
    guard(|| {
        if tau_hat.is_null() || tau.is_null() || out.is_null() {
            return Err(null("tau_hat, tau or out"));
        }
        let a = std::slice::from_raw_parts(tau_hat, len);
        let b = std::slice::from_raw_parts(tau, len);
        *out = metrics::pehe(a, b).map_err(|e| (CrfStatus::Data, e.to_string()))?;
        Ok(())
    })
}
