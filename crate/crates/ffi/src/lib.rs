//! C ABI over the `bridgelab` library.
//!
//! Datasets and models cross the boundary as opaque heap handles that the
//! caller releases with the matching `*_free` function. Every fallible call
//! returns a [`BlStatus`]; on failure a description of the most recent error
//! on the calling thread is available from [`bl_last_error_message`].
//! Configuration is passed as `key = value` text using the same keys as the
//! command-line tool's configuration files.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bridgelab::cli::{gen_config_from_map, RunConfig};
use bridgelab::config::ConfigMap;
use bridgelab::data::{generate_synthetic, MultimodalDataset};
use bridgelab::diagnostics::gradient_suite;
use bridgelab::model::Model;
use bridgelab::train::{evaluate, train, TrainLog};
use bridgelab::Error;

/// Result codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Format = 4,
    Io = 5,
    InsufficientData = 6,
    Numerical = 7,
    ValidationFailed = 8,
    Panic = 9,
}

/// Opaque dataset handle.
pub struct BlDataset(MultimodalDataset);

/// Opaque trained-model handle.
pub struct BlModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> BlStatus {
    match e {
        Error::Shape(_) | Error::InvalidArgument(_) | Error::Unbound(_) | Error::NonScalar(_) => {
            BlStatus::InvalidArgument
        }
        Error::Config(_) => BlStatus::Config,
        Error::Format(_) | Error::Checksum { .. } => BlStatus::Format,
        Error::Io { .. } => BlStatus::Io,
        Error::InsufficientData(_) => BlStatus::InsufficientData,
        Error::NonFinite(_)
        | Error::EmptyReduction(_)
        | Error::DegenerateStatistics(_)
        | Error::Divergence { .. } => BlStatus::Numerical,
    }
}

struct Failure(BlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(BlStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, converting errors and panics into a status code and the
/// thread's last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            BlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BlStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(BlStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn parse_config(p: *const c_char) -> Result<ConfigMap, Failure> {
    if p.is_null() {
        return Ok(ConfigMap::new());
    }
    Ok(ConfigMap::parse(text(p, "config")?)?)
}

/// # Safety
/// `p` must be null or point to a live handle created by this library.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null if the last
/// call succeeded. The pointer stays valid until the next call on the same
/// thread.
#[no_mangle]
pub extern "C" fn bl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Generates a synthetic dataset from generator configuration text
/// (`classes`, `per_class`, `ambiguity`, `seed`, ...). A null `config`
/// selects all defaults.
///
/// # Safety
/// `config` must be null or a NUL-terminated string; `out` must be a valid
/// pointer to write the new handle to.
#[no_mangle]
pub unsafe extern "C" fn bl_dataset_generate(config: *const c_char, out: *mut *mut BlDataset) -> BlStatus {
    guard(|| {
        let (cfg, _) = gen_config_from_map(&parse_config(config)?, 0)?;
        put(out, BlDataset(generate_synthetic(&cfg)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bl_dataset_load(path: *const c_char, out: *mut *mut BlDataset) -> BlStatus {
    guard(|| {
        let p = PathBuf::from(text(path, "path")?);
        put(out, BlDataset(MultimodalDataset::load(&p)?))
    })
}

/// # Safety
/// `dataset` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bl_dataset_save(dataset: *const BlDataset, path: *const c_char) -> BlStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        Ok(ds.0.save(&PathBuf::from(text(path, "path")?))?)
    })
}

/// Number of instances and classes in a dataset.
///
/// # Safety
/// `dataset` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn bl_dataset_size(
    dataset: *const BlDataset,
    out_instances: *mut usize,
    out_classes: *mut usize,
) -> BlStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        if let Some(n) = out_instances.as_mut() {
            *n = ds.0.len();
        }
        if let Some(c) = out_classes.as_mut() {
            *c = ds.0.classes();
        }
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bl_dataset_free(dataset: *mut BlDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains a model on `dataset` using run configuration text (`variant`,
/// `steps`, `lr`, `way`, `shot`, `query`, `seed`, backbone and bridge
/// keys, ...). A null `config` selects all defaults.
///
/// # Safety
/// `dataset` must be a live handle, `config` null or a NUL-terminated
/// string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bl_model_train(
    dataset: *const BlDataset,
    config: *const c_char,
    out: *mut *mut BlModel,
) -> BlStatus {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.0;
        let cfg = RunConfig::from_map(&parse_config(config)?, 0)?;
        let model = Model::new(cfg.model.fit_to(ds), cfg.train.seed)?;
        let outcome = train(model, ds, &cfg.train, &mut TrainLog::default())?;
        put(out, BlModel(outcome.model))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bl_model_load(path: *const c_char, out: *mut *mut BlModel) -> BlStatus {
    guard(|| {
        let p = PathBuf::from(text(path, "path")?);
        put(out, BlModel(Model::load(&p)?))
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bl_model_save(model: *const BlModel, path: *const c_char) -> BlStatus {
    guard(|| {
        let m = handle(model, "model")?;
        Ok(m.0.save(&PathBuf::from(text(path, "path")?))?)
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bl_model_free(model: *mut BlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mean episode accuracy and its 95% CI half-width over the evaluation
/// stream selected by `config` (`eval_seed`, `eval_episodes`,
/// `eval_split`, episode shape, `workers`).
///
/// # Safety
/// `model` and `dataset` must be live handles, `config` null or a
/// NUL-terminated string, and both out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn bl_evaluate(
    model: *const BlModel,
    dataset: *const BlDataset,
    config: *const c_char,
    out_mean: *mut f64,
    out_ci95: *mut f64,
) -> BlStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let ds = &handle(dataset, "dataset")?.0;
        if out_mean.is_null() || out_ci95.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::from_map(&parse_config(config)?, 0)?;
        let report = evaluate(m, ds, &cfg.eval)?;
        *out_mean = report.mean;
        *out_ci95 = report.ci95;
        Ok(())
    })
}

/// Runs the gradient-check suite. Writes the worst relative error across
/// components and returns `ValidationFailed` if it exceeds the tolerance.
///
/// # Safety
/// `out_max_rel_error` must be null or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bl_gradcheck(seed: u64, out_max_rel_error: *mut f64) -> BlStatus {
    guard(|| {
        let checks = gradient_suite(seed, Default::default())?;
        let worst = checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
        if let Some(w) = out_max_rel_error.as_mut() {
            *w = worst;
        }
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.component).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Failure(
                BlStatus::ValidationFailed,
                format!("gradient check failed: {}", failed.join(", ")),
            ))
        }
    })
}
