//! C ABI over the experiment runner.
//!
//! Handles are opaque and owned by the caller once returned; free them with
//! the matching `*_free`. Every fallible call returns an [`LlmnetStatus`];
//! on failure [`llmnet_last_error`] gives a message for the calling thread.
//! Strings returned as `char*` must be released with [`llmnet_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use llmnet_core::cli::{emit_plotdata, run_experiment, ExperimentConfig, ExperimentKind, Manifest};
use llmnet_core::reconfig::{delta1_bound, wilson_interval};
use llmnet_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LlmnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad config or argument; nothing was run.
    ConfigError = 3,
    /// The experiment started and failed.
    RuntimeError = 4,
    OutOfRange = 5,
    Panic = 6,
}

/// Experiment configuration.
pub struct LlmnetConfig {
    inner: ExperimentConfig,
}

/// Result of a finished run.
pub struct LlmnetRun {
    dir: PathBuf,
    manifest: Manifest,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn fail(status: LlmnetStatus, msg: impl Into<String>) -> LlmnetStatus {
    set_error(msg);
    status
}

fn from_core(e: &Error) -> LlmnetStatus {
    let s = if e.is_validation() {
        LlmnetStatus::ConfigError
    } else {
        LlmnetStatus::RuntimeError
    };
    fail(s, e.to_string())
}

/// Runs `f`, turning panics into [`LlmnetStatus::Panic`].
fn guard(f: impl FnOnce() -> LlmnetStatus) -> LlmnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == LlmnetStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(LlmnetStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, LlmnetStatus> {
    if p.is_null() {
        return Err(fail(LlmnetStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LlmnetStatus::InvalidUtf8, "string argument is not UTF-8"))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($p:expr) => {
        if $p.is_null() {
            return fail(LlmnetStatus::NullPointer, concat!("null pointer: ", stringify!($p)));
        }
    };
}

/// Message for the last failed call on this thread, or null after a
/// successful one. The pointer stays valid until the next call into this
/// library on the same thread.
#[no_mangle]
pub extern "C" fn llmnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn llmnet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default config for `kind` (e.g. `"prop1"`, `"reconfig-bench"`).
///
/// # Safety
/// `kind` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn llmnet_config_default(kind: *const c_char, out: *mut *mut LlmnetConfig) -> LlmnetStatus {
    guard(|| {
        non_null!(out);
        let kind: ExperimentKind = match tri!(read_str(kind)).parse() {
            Ok(k) => k,
            Err(e) => return from_core(&e),
        };
        *out = Box::into_raw(Box::new(LlmnetConfig {
            inner: ExperimentConfig::new(kind),
        }));
        LlmnetStatus::Ok
    })
}

/// Parses a TOML config. Missing keys take the defaults of its `kind`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn llmnet_config_from_toml(text: *const c_char, out: *mut *mut LlmnetConfig) -> LlmnetStatus {
    guard(|| {
        non_null!(out);
        match ExperimentConfig::from_toml_str(tri!(read_str(text))) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(LlmnetConfig { inner }));
                LlmnetStatus::Ok
            }
            Err(e) => from_core(&e),
        }
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn llmnet_config_load(path: *const c_char, out: *mut *mut LlmnetConfig) -> LlmnetStatus {
    guard(|| {
        non_null!(out);
        match ExperimentConfig::load(std::path::Path::new(tri!(read_str(path)))) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(LlmnetConfig { inner }));
                LlmnetStatus::Ok
            }
            Err(e) => from_core(&e),
        }
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn llmnet_config_free(cfg: *mut LlmnetConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn llmnet_config_set_seed(cfg: *mut LlmnetConfig, seed: u64) -> LlmnetStatus {
    guard(|| {
        non_null!(cfg);
        (*cfg).inner.seed = seed;
        LlmnetStatus::Ok
    })
}

/// # Safety
/// `cfg` must be a live config handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn llmnet_config_set_out(cfg: *mut LlmnetConfig, dir: *const c_char) -> LlmnetStatus {
    guard(|| {
        non_null!(cfg);
        (*cfg).inner.out = Some(PathBuf::from(tri!(read_str(dir))));
        LlmnetStatus::Ok
    })
}

/// `jobs = 0` means all cores.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn llmnet_config_set_jobs(cfg: *mut LlmnetConfig, jobs: usize) -> LlmnetStatus {
    guard(|| {
        non_null!(cfg);
        (*cfg).inner.jobs = (jobs > 0).then_some(jobs);
        LlmnetStatus::Ok
    })
}

/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn llmnet_config_validate(cfg: *const LlmnetConfig) -> LlmnetStatus {
    guard(|| {
        non_null!(cfg);
        match (*cfg).inner.validate() {
            Ok(()) => LlmnetStatus::Ok,
            Err(e) => from_core(&e),
        }
    })
}

/// Effective config as TOML, or null on a null handle.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn llmnet_config_to_toml(cfg: *const LlmnetConfig) -> *mut c_char {
    if cfg.is_null() {
        set_error("null pointer: cfg");
        return ptr::null_mut();
    }
    into_c_string((*cfg).inner.to_toml())
}

/// Validates and runs the experiment, writing artifacts to the config's
/// output directory.
///
/// # Safety
/// `cfg` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn llmnet_run(cfg: *const LlmnetConfig, out: *mut *mut LlmnetRun) -> LlmnetStatus {
    guard(|| {
        non_null!(cfg);
        non_null!(out);
        let c = &(*cfg).inner;
        match run_experiment(c) {
            Ok(manifest) => {
                *out = Box::into_raw(Box::new(LlmnetRun {
                    dir: c.out_dir(),
                    manifest,
                }));
                LlmnetStatus::Ok
            }
            Err(e) => from_core(&e),
        }
    })
}

/// # Safety
/// `run` must be null or a handle from [`llmnet_run`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn llmnet_run_free(run: *mut LlmnetRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// # Safety
/// `run` must be a live run handle.
#[no_mangle]
pub unsafe extern "C" fn llmnet_run_wall_time(run: *const LlmnetRun) -> f64 {
    if run.is_null() {
        return f64::NAN;
    }
    (*run).manifest.wall_time_secs
}

/// # Safety
/// `run` must be a live run handle.
#[no_mangle]
pub unsafe extern "C" fn llmnet_run_artifact_count(run: *const LlmnetRun) -> usize {
    if run.is_null() {
        return 0;
    }
    (*run).manifest.artifacts.len()
}

/// Path of artifact `idx` and its SHA-256 as hex. Either output may be null.
///
/// # Safety
/// `run` must be a live run handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn llmnet_run_artifact(
    run: *const LlmnetRun,
    idx: usize,
    path: *mut *mut c_char,
    sha256: *mut *mut c_char,
) -> LlmnetStatus {
    guard(|| {
        non_null!(run);
        let r = &*run;
        let Some(a) = r.manifest.artifacts.get(idx) else {
            return fail(
                LlmnetStatus::OutOfRange,
                format!("artifact {idx} out of range ({} artifacts)", r.manifest.artifacts.len()),
            );
        };
        if !path.is_null() {
            *path = into_c_string(r.dir.join(&a.file).display().to_string());
        }
        if !sha256.is_null() {
            *sha256 = into_c_string(a.sha256.clone());
        }
        LlmnetStatus::Ok
    })
}

/// Headline numbers of the run as a JSON object.
///
/// # Safety
/// `run` must be a live run handle.
#[no_mangle]
pub unsafe extern "C" fn llmnet_run_summary_json(run: *const LlmnetRun) -> *mut c_char {
    if run.is_null() {
        set_error("null pointer: run");
        return ptr::null_mut();
    }
    into_c_string((*run).manifest.summary.to_string())
}

/// Writes plot tables for a finished run directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string; `n_written` may be null.
#[no_mangle]
pub unsafe extern "C" fn llmnet_emit_plotdata(run_dir: *const c_char, n_written: *mut usize) -> LlmnetStatus {
    guard(|| {
        let dir = tri!(read_str(run_dir));
        match emit_plotdata(std::path::Path::new(dir)) {
            Ok(files) => {
                if !n_written.is_null() {
                    *n_written = files.len();
                }
                LlmnetStatus::Ok
            }
            Err(e) => from_core(&e),
        }
    })
}

/// `δ₁` for `n` agents with per-class misclassification rates `p_t`, `p_h`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn llmnet_delta1_bound(n: usize, p_t: f64, p_h: f64, out: *mut f64) -> LlmnetStatus {
    guard(|| {
        non_null!(out);
        match delta1_bound(n, p_t, p_h) {
            Ok(d) => {
                *out = d;
                LlmnetStatus::Ok
            }
            Err(e) => from_core(&e),
        }
    })
}

/// 95% Wilson score interval for `successes` out of `trials`.
///
/// # Safety
/// `lo` and `hi` must be writable.
#[no_mangle]
pub unsafe extern "C" fn llmnet_wilson_interval(successes: usize, trials: usize, lo: *mut f64, hi: *mut f64) -> LlmnetStatus {
    guard(|| {
        non_null!(lo);
        non_null!(hi);
        if trials == 0 || successes > trials {
            return fail(LlmnetStatus::OutOfRange, format!("need 0 <= successes <= trials, trials > 0 (got {successes}/{trials})"));
        }
        let (a, b) = wilson_interval(successes, trials);
        *lo = a;
        *hi = b;
        LlmnetStatus::Ok
    })
}
