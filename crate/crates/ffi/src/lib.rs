//! C ABI over the predictor.
//!
//! Every function returns a [`DykStatus`]; on failure the message is kept
//! per thread and read with [`dyk_last_error`]. Handles are opaque and
//! owned by the caller, who releases them with the matching `_free`.
//! Strings are NUL-terminated UTF-8. Config text uses the same `key=value`
//! lines as the command-line config file.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dykonem::config::{parse_pairs, RunConfig};
use dykonem::dataset::Dataset;
use dykonem::predictor::{evaluate, train, Model};
use dykonem::synthgen::generate;
use dykonem::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DykStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    ModelFormat = 6,
    SingleClass = 7,
    /// Output buffer length does not match.
    BufferSize = 8,
    Failure = 9,
    Panic = 10,
}

/// Opaque dataset handle.
pub struct DykDataset {
    inner: Dataset,
}

/// Opaque model handle.
pub struct DykModel {
    inner: Model,
}

/// Failure-class metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DykMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DykStatus {
    match e {
        Error::Io { .. } => DykStatus::Io,
        Error::Parse { .. } | Error::Schema(_) => DykStatus::Parse,
        Error::Config(_) => DykStatus::Config,
        Error::ModelFormat(_) => DykStatus::ModelFormat,
        Error::SingleClass => DykStatus::SingleClass,
        _ => DykStatus::Failure,
    }
}

struct Fail(DykStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DykStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DykStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DykStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(DykStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DykStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(DykStatus::NullPointer, format!("{what} is null")))
}

fn out_arg<T>(p: *mut *mut T) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail(DykStatus::NullPointer, "output pointer is null".into()));
    }
    Ok(())
}

/// Config from optional `key=value` text over the defaults.
unsafe fn config_arg(text: *const c_char) -> Result<RunConfig, Fail> {
    let mut cfg = RunConfig::default();
    if !text.is_null() {
        let text = str_arg(text, "config")?;
        cfg.apply(&parse_pairs(text, &PathBuf::from("<config>"))?)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dyk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static string.
#[no_mangle]
pub extern "C" fn dyk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a dataset directory.
///
/// # Safety
/// `dir` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dyk_dataset_load(dir: *const c_char, out: *mut *mut DykDataset) -> DykStatus {
    guard(|| {
        out_arg(out)?;
        let dir = str_arg(dir, "dir")?;
        let inner = Dataset::load(dir.as_ref())?;
        *out = Box::into_raw(Box::new(DykDataset { inner }));
        Ok(())
    })
}

/// Generates a synthetic dataset from the `gen.*` keys of `config`
/// (nullable: defaults).
///
/// # Safety
/// `config` must be null or a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dyk_dataset_generate(config: *const c_char, out: *mut *mut DykDataset) -> DykStatus {
    guard(|| {
        out_arg(out)?;
        let cfg = config_arg(config)?;
        let inner = generate(&cfg.gen)?;
        *out = Box::into_raw(Box::new(DykDataset { inner }));
        Ok(())
    })
}

/// Writes the dataset files into `dir`.
///
/// # Safety
/// `dataset` must come from this library; `dir` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn dyk_dataset_write(dataset: *const DykDataset, dir: *const c_char) -> DykStatus {
    guard(|| {
        let ds = ref_arg(dataset, "dataset")?;
        ds.inner.write(str_arg(dir, "dir")?.as_ref())?;
        Ok(())
    })
}

/// Number of consultations.
///
/// # Safety
/// `dataset` must come from this library; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dyk_dataset_len(dataset: *const DykDataset, out: *mut usize) -> DykStatus {
    guard(|| {
        let ds = ref_arg(dataset, "dataset")?;
        if out.is_null() {
            return Err(Fail(DykStatus::NullPointer, "output pointer is null".into()));
        }
        *out = ds.inner.consultations.len();
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or come from this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn dyk_dataset_free(dataset: *mut DykDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains a model with the `model.*` and `train.*` keys of `config`
/// (nullable: defaults). The best-validation checkpoint is returned.
///
/// # Safety
/// `dataset` must come from this library; `config` null or a valid C
/// string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dyk_model_train(
    dataset: *const DykDataset,
    config: *const c_char,
    out: *mut *mut DykModel,
) -> DykStatus {
    guard(|| {
        out_arg(out)?;
        let ds = ref_arg(dataset, "dataset")?;
        let cfg = config_arg(config)?;
        let outcome = train(&ds.inner, &cfg.model, &cfg.train)?;
        *out = Box::into_raw(Box::new(DykModel { inner: outcome.model }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dyk_model_load(path: *const c_char, out: *mut *mut DykModel) -> DykStatus {
    guard(|| {
        out_arg(out)?;
        let inner = Model::load(str_arg(path, "path")?.as_ref())?;
        *out = Box::into_raw(Box::new(DykModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn dyk_model_save(model: *const DykModel, path: *const c_char) -> DykStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        m.inner.save(str_arg(path, "path")?.as_ref())?;
        Ok(())
    })
}

/// Failure probabilities in consultation order; `len` must equal the
/// dataset length.
///
/// # Safety
/// `model` and `dataset` must come from this library; `probabilities` must
/// point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dyk_model_predict(
    model: *const DykModel,
    dataset: *const DykDataset,
    probabilities: *mut f64,
    len: usize,
) -> DykStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ds = ref_arg(dataset, "dataset")?;
        if probabilities.is_null() {
            return Err(Fail(DykStatus::NullPointer, "probabilities is null".into()));
        }
        if len != ds.inner.consultations.len() {
            return Err(Fail(
                DykStatus::BufferSize,
                format!("buffer holds {len} values, dataset has {}", ds.inner.consultations.len()),
            ));
        }
        let preds = m.inner.predict(&m.inner.prepare(&ds.inner)?)?;
        let buf = std::slice::from_raw_parts_mut(probabilities, len);
        for (slot, p) in buf.iter_mut().zip(&preds) {
            *slot = p.probability;
        }
        Ok(())
    })
}

/// Metrics over every labeled consultation of `dataset`.
///
/// # Safety
/// `model` and `dataset` must come from this library; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dyk_model_evaluate(
    model: *const DykModel,
    dataset: *const DykDataset,
    out: *mut DykMetrics,
) -> DykStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ds = ref_arg(dataset, "dataset")?;
        if out.is_null() {
            return Err(Fail(DykStatus::NullPointer, "output pointer is null".into()));
        }
        let r = evaluate(&m.inner, &ds.inner, None, None)?.metrics;
        *out = DykMetrics {
            f1: r.f1,
            precision: r.precision,
            recall: r.recall,
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn dyk_model_free(model: *mut DykModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
