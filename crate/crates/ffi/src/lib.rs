//! C ABI over pet-core.
//!
//! Every fallible call returns a [`PetStatus`]; on failure
//! `pet_last_error()` describes the problem until the next call on the same
//! thread. Handles are opaque and released with their `_free` function.
//! Strings the library allocates are released with `pet_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use pet_core::pipeline::RunConfig;
use pet_core::run::{self, Command, DataPaths, MetricsReport, OutputOptions, SavedClassifier};
use pet_core::task::TaskConfig;
use pet_core::PetError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PetStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    DataError = 4,
    BackendError = 5,
    Panic = 6,
    NotFound = 7,
}

pub struct PetTask {
    inner: TaskConfig,
}

pub struct PetConfig {
    inner: RunConfig,
}

pub struct PetReport {
    inner: MetricsReport,
}

pub struct PetClassifier {
    inner: SavedClassifier,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(PetStatus, String);

impl From<PetError> for Failure {
    fn from(e: PetError) -> Self {
        let status = match e.exit_code() {
            2 => PetStatus::ConfigError,
            3 => PetStatus::DataError,
            _ => PetStatus::BackendError,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, turning errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PetStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            PetStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(PetStatus::NullArgument, format!("{name} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PetStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn opt_path(p: *const c_char, name: &str) -> Result<Option<PathBuf>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(|s| Some(PathBuf::from(s)))
    }
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn pet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn pet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn pet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ------------------------------------------------------------------ tasks

/// Loads a task file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pet_task_load(path: *const c_char, out: *mut *mut PetTask) -> PetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let task = TaskConfig::load(Path::new(str_arg(path, "path")?))?;
        *out = boxed(PetTask { inner: task });
        Ok(())
    })
}

/// Parses a task from TOML text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pet_task_from_toml(text: *const c_char, out: *mut *mut PetTask) -> PetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let task = TaskConfig::from_toml(str_arg(text, "text")?)?;
        *out = boxed(PetTask { inner: task });
        Ok(())
    })
}

/// # Safety
/// `task` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn pet_task_num_labels(task: *const PetTask) -> usize {
    task.as_ref().map_or(0, |t| t.inner.labels.len())
}

/// # Safety
/// `task` must come from `pet_task_load`/`pet_task_from_toml` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn pet_task_free(task: *mut PetTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

// ------------------------------------------------------------------ configs

/// Parses a run config from TOML text; NULL gives the defaults.
///
/// # Safety
/// `text` must be NULL or NUL-terminated, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pet_config_from_toml(text: *const c_char, out: *mut *mut PetConfig) -> PetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let config = if text.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(str_arg(text, "text")?)?
        };
        *out = boxed(PetConfig { inner: config });
        Ok(())
    })
}

/// Derives every module seed from `seed`.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pet_config_set_seed(config: *mut PetConfig, seed: u64) -> PetStatus {
    guard(|| {
        out_ptr(config, "config")?.inner.reseed(seed);
        Ok(())
    })
}

/// # Safety
/// `config` must come from `pet_config_from_toml` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn pet_config_free(config: *mut PetConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

// ------------------------------------------------------------------ runs

/// Runs `command` (`pet`, `ipet`, `supervised` or `avs`) into `out_dir`.
/// `test` may be NULL. `jobs` of 0 means one.
///
/// # Safety
/// Strings must be NUL-terminated, handles live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pet_run(
    command: *const c_char,
    task: *const PetTask,
    config: *const PetConfig,
    train: *const c_char,
    unlabeled: *const c_char,
    test: *const c_char,
    out_dir: *const c_char,
    jobs: usize,
    out: *mut *mut PetReport,
) -> PetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let data = DataPaths {
            train: PathBuf::from(str_arg(train, "train")?),
            unlabeled: PathBuf::from(str_arg(unlabeled, "unlabeled")?),
            test: opt_path(test, "test")?,
        };
        let command = match str_arg(command, "command")? {
            "pet" => Command::Pet { data },
            "ipet" => Command::Ipet { data, resume: false },
            "supervised" => Command::Supervised { data },
            "avs" => Command::Avs { data },
            other => {
                return Err(Failure(
                    PetStatus::ConfigError,
                    format!("unknown command {other:?}; expected pet, ipet, supervised or avs"),
                ))
            }
        };
        let report = run::execute(
            command,
            handle(task, "task")?.inner.clone(),
            handle(config, "config")?.inner.clone(),
            Path::new(str_arg(out_dir, "out_dir")?),
            jobs.max(1),
            &OutputOptions::default(),
        )?;
        *out = boxed(PetReport { inner: report });
        Ok(())
    })
}

/// Re-executes a run from its manifest into `out_dir`; fails with
/// `DataError` when the metrics differ.
///
/// # Safety
/// Strings must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pet_rerun(run_dir: *const c_char, out_dir: *const c_char, out: *mut *mut PetReport) -> PetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let report = run::rerun(
            Path::new(str_arg(run_dir, "run_dir")?),
            Path::new(str_arg(out_dir, "out_dir")?),
            &OutputOptions::default(),
        )?;
        *out = boxed(PetReport { inner: report });
        Ok(())
    })
}

/// Accuracy of the last report row with the given stage (`final`,
/// `supervised`, `pvp-mean`, ...). `NotFound` when there is none.
///
/// # Safety
/// `report` must be live, `stage` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pet_report_accuracy(report: *const PetReport, stage: *const c_char, out: *mut f64) -> PetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let stage = str_arg(stage, "stage")?;
        let acc = handle(report, "report")?
            .inner
            .rows
            .iter()
            .rev()
            .find(|r| r.stage == stage)
            .and_then(|r| r.accuracy)
            .ok_or_else(|| Failure(PetStatus::NotFound, format!("no accuracy for stage {stage:?}")))?;
        *out = acc;
        Ok(())
    })
}

/// The report as JSON; free with `pet_string_free`.
///
/// # Safety
/// `report` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pet_report_json(report: *const PetReport, out: *mut *mut c_char) -> PetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let json = serde_json::to_string(&handle(report, "report")?.inner).expect("reports serialize");
        *out = CString::new(json).expect("JSON has no NUL bytes").into_raw();
        Ok(())
    })
}

/// # Safety
/// `report` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn pet_report_free(report: *mut PetReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

// ------------------------------------------------------------------ classifiers

/// Loads the `classifier` or `supervised` model of a finished run.
///
/// # Safety
/// Strings must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pet_classifier_load(
    run_dir: *const c_char,
    name: *const c_char,
    out: *mut *mut PetClassifier,
) -> PetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let c = SavedClassifier::load(Path::new(str_arg(run_dir, "run_dir")?), str_arg(name, "name")?)?;
        *out = boxed(PetClassifier { inner: c });
        Ok(())
    })
}

/// # Safety
/// `classifier` must be live or NULL.
#[no_mangle]
pub unsafe extern "C" fn pet_classifier_num_labels(classifier: *const PetClassifier) -> usize {
    classifier.as_ref().map_or(0, |c| c.inner.task.labels.len())
}

/// Label probabilities for one input of `n_segments` text segments,
/// written to `probs`, which holds `n_labels` doubles.
///
/// # Safety
/// `segments` must point to `n_segments` NUL-terminated strings and `probs`
/// to `n_labels` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pet_classifier_predict(
    classifier: *const PetClassifier,
    segments: *const *const c_char,
    n_segments: usize,
    probs: *mut f64,
    n_labels: usize,
) -> PetStatus {
    guard(|| {
        let c = &handle(classifier, "classifier")?.inner;
        if segments.is_null() {
            return Err(null("segments"));
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        let texts = std::slice::from_raw_parts(segments, n_segments)
            .iter()
            .map(|&p| str_arg(p, "segment"))
            .collect::<Result<Vec<_>, _>>()?;
        let q = c.predict(&texts)?;
        if q.len() != n_labels {
            return Err(Failure(
                PetStatus::ConfigError,
                format!("task has {} labels, buffer holds {n_labels}", q.len()),
            ));
        }
        std::slice::from_raw_parts_mut(probs, n_labels).copy_from_slice(&q);
        Ok(())
    })
}

/// # Safety
/// `classifier` must come from `pet_classifier_load` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn pet_classifier_free(classifier: *mut PetClassifier) {
    if !classifier.is_null() {
        drop(Box::from_raw(classifier));
    }
}

// ------------------------------------------------------------------ arithmetic

/// Temperature softmax of `n` scores into `out`.
///
/// # Safety
/// `scores` and `out` must each point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn pet_soft_label(scores: *const f64, n: usize, temperature: f64, out: *mut f64) -> PetStatus {
    guard(|| {
        if scores.is_null() || out.is_null() {
            return Err(null("scores or out"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Failure(PetStatus::ConfigError, format!("temperature {temperature} must be positive")));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let q = pet_core::ensemble::soft_label(s, temperature);
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&q);
        Ok(())
    })
}
