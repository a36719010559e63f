//! C ABI for the simulator: opaque handles, integer status codes, and a
//! thread-local last-error message. The generated header lives in
//! `include/fedsim.h`.
//!
//! Ownership rules: every `*_new`/`*_parse`/`fedsim_run` output is owned by
//! the caller and must be released with the matching `*_free`. Strings
//! returned by `fedsim_last_error_message` and `fedsim_version` are borrowed
//! and must not be freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

use fedsim_core::config::{is_known_key, parse_config_with_overrides, render_defaults};
use fedsim_core::federation::{run_experiment, RoundMetrics, Summary};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FedsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    RunError = 4,
    OutOfRange = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Experiment configuration handle: the config text plus programmatic
/// overrides, validated eagerly on every mutation.
pub struct FedsimConfig {
    text: String,
    overrides: Vec<(&'static str, String)>,
}

impl FedsimConfig {
    fn materialize(&self) -> Result<fedsim_core::ExperimentConfig, fedsim_core::SimError> {
        parse_config_with_overrides(&self.text, &self.overrides)
    }
}

/// A finished run: per-round metrics plus the tail summary.
pub struct FedsimRun {
    metrics: Vec<RoundMetrics>,
    summary: Summary,
}

/// Returns the last error message for this thread as a NUL-terminated UTF-8
/// string. Borrowed; valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fedsim_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Crate version as a static string.
#[no_mangle]
pub extern "C" fn fedsim_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Parses a configuration document (flat `key = value` text, UTF-8,
/// NUL-terminated). An empty string yields the documented defaults. On
/// success writes a new handle into `out`.
///
/// # Safety
/// `text` must point to a NUL-terminated string and `out` to writable
/// pointer storage.
#[no_mangle]
pub unsafe extern "C" fn fedsim_config_parse(
    text: *const c_char,
    out: *mut *mut FedsimConfig,
) -> FedsimStatus {
    if text.is_null() || out.is_null() {
        set_error("null pointer argument");
        return FedsimStatus::NullPointer;
    }
    let Ok(text) = CStr::from_ptr(text).to_str() else {
        set_error("config text is not valid UTF-8");
        return FedsimStatus::InvalidUtf8;
    };
    let config = FedsimConfig {
        text: text.to_string(),
        overrides: Vec::new(),
    };
    if let Err(e) = config.materialize() {
        set_error(&e.to_string());
        return FedsimStatus::ConfigError;
    }
    *out = Box::into_raw(Box::new(config));
    FedsimStatus::Ok
}

/// Creates a handle holding the documented default configuration.
///
/// # Safety
/// `out` must point to writable pointer storage.
#[no_mangle]
pub unsafe extern "C" fn fedsim_config_default(out: *mut *mut FedsimConfig) -> FedsimStatus {
    if out.is_null() {
        set_error("null pointer argument");
        return FedsimStatus::NullPointer;
    }
    *out = Box::into_raw(Box::new(FedsimConfig {
        text: String::new(),
        overrides: Vec::new(),
    }));
    FedsimStatus::Ok
}

/// Overrides one configuration key (e.g. `fl.seed`, `agg.rule`) with a new
/// value, re-validating the whole document.
///
/// # Safety
/// All pointers must be valid; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fedsim_config_set(
    config: *mut FedsimConfig,
    key: *const c_char,
    value: *const c_char,
) -> FedsimStatus {
    if config.is_null() || key.is_null() || value.is_null() {
        set_error("null pointer argument");
        return FedsimStatus::NullPointer;
    }
    let (Ok(key), Ok(value)) = (CStr::from_ptr(key).to_str(), CStr::from_ptr(value).to_str())
    else {
        set_error("key or value is not valid UTF-8");
        return FedsimStatus::InvalidUtf8;
    };
    let Some(known) = fedsim_core::config::CONFIG_KEYS
        .iter()
        .find(|k| k.name == key)
    else {
        set_error(&format!("unknown key '{key}'"));
        return FedsimStatus::ConfigError;
    };
    debug_assert!(is_known_key(known.name));
    let config = &mut *config;
    let previous = config
        .overrides
        .iter()
        .position(|(k, _)| *k == known.name)
        .map(|i| config.overrides.remove(i));
    config.overrides.push((known.name, value.to_string()));
    if let Err(e) = config.materialize() {
        // Roll back so the handle keeps its last valid state.
        config.overrides.pop();
        if let Some(prev) = previous {
            config.overrides.push(prev);
        }
        set_error(&e.to_string());
        return FedsimStatus::ConfigError;
    }
    FedsimStatus::Ok
}

/// Releases a configuration handle. Passing NULL is a no-op.
///
/// # Safety
/// `config` must be a pointer returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedsim_config_free(config: *mut FedsimConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

unsafe fn run_impl(
    config: *const FedsimConfig,
    out: *mut *mut FedsimRun,
    benign_only: bool,
) -> FedsimStatus {
    if config.is_null() || out.is_null() {
        set_error("null pointer argument");
        return FedsimStatus::NullPointer;
    }
    let mut experiment = match (*config).materialize() {
        Ok(c) => c,
        Err(e) => {
            set_error(&e.to_string());
            return FedsimStatus::ConfigError;
        }
    };
    experiment.benign_only = benign_only;
    match run_experiment(experiment) {
        Ok(run) => {
            *out = Box::into_raw(Box::new(FedsimRun {
                metrics: run.metrics,
                summary: run.summary,
            }));
            FedsimStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            FedsimStatus::RunError
        }
    }
}

/// Runs the configured experiment to completion.
///
/// # Safety
/// `config` must be a live handle; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run(
    config: *const FedsimConfig,
    out: *mut *mut FedsimRun,
) -> FedsimStatus {
    run_impl(config, out, false)
}

/// Runs the benign-only reference: malicious clients are dropped entirely
/// and the remaining clients keep their original partitions.
///
/// # Safety
/// Same contract as [`fedsim_run`].
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_benign_reference(
    config: *const FedsimConfig,
    out: *mut *mut FedsimRun,
) -> FedsimStatus {
    run_impl(config, out, true)
}

/// Number of completed rounds in a run.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_rounds(run: *const FedsimRun) -> usize {
    if run.is_null() {
        return 0;
    }
    (*run).metrics.len()
}

/// Clean accuracy and attack success rate of one round.
///
/// # Safety
/// `run` must be a live handle; the out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_metrics(
    run: *const FedsimRun,
    round: usize,
    out_clean_acc: *mut f64,
    out_asr: *mut f64,
) -> FedsimStatus {
    if run.is_null() || out_clean_acc.is_null() || out_asr.is_null() {
        set_error("null pointer argument");
        return FedsimStatus::NullPointer;
    }
    let run = &*run;
    let Some(m) = run.metrics.get(round) else {
        set_error(&format!(
            "round {round} out of range (run has {} rounds)",
            run.metrics.len()
        ));
        return FedsimStatus::OutOfRange;
    };
    *out_clean_acc = m.clean_accuracy;
    *out_asr = m.asr;
    FedsimStatus::Ok
}

/// Mean and sample standard deviation of accuracy and ASR over the summary
/// window (the final rounds of the run).
///
/// # Safety
/// `run` must be a live handle; the out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_summary(
    run: *const FedsimRun,
    out_clean_acc_mean: *mut f64,
    out_clean_acc_std: *mut f64,
    out_asr_mean: *mut f64,
    out_asr_std: *mut f64,
) -> FedsimStatus {
    if run.is_null()
        || out_clean_acc_mean.is_null()
        || out_clean_acc_std.is_null()
        || out_asr_mean.is_null()
        || out_asr_std.is_null()
    {
        set_error("null pointer argument");
        return FedsimStatus::NullPointer;
    }
    let s = (*run).summary;
    *out_clean_acc_mean = s.clean_acc_mean;
    *out_clean_acc_std = s.clean_acc_std;
    *out_asr_mean = s.asr_mean;
    *out_asr_std = s.asr_std;
    FedsimStatus::Ok
}

/// Releases a run handle. Passing NULL is a no-op.
///
/// # Safety
/// `run` must be a pointer returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedsim_run_free(run: *mut FedsimRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Writes the documented default configuration into a caller buffer as
/// NUL-terminated text and returns the number of bytes required (including
/// the NUL). When `buffer` is NULL or too small, nothing is written; call
/// with NULL to size the buffer first.
///
/// # Safety
/// When non-NULL, `buffer` must have space for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn fedsim_default_config_text(
    buffer: *mut c_char,
    capacity: usize,
) -> usize {
    let text = render_defaults();
    let needed = text.len() + 1;
    if !buffer.is_null() && capacity >= needed {
        ptr::copy_nonoverlapping(text.as_ptr() as *const c_char, buffer, text.len());
        *buffer.add(text.len()) = 0;
    }
    needed
}
