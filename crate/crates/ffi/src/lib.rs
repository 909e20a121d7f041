//! C ABI for the fedssa simulator.
//!
//! Handles are opaque pointers created and freed by this library; every
//! fallible call returns a [`FedssaStatus`] and writes results through out
//! parameters. On any non-OK status, `fedssa_last_error_message` returns a
//! heap-allocated description of the most recent error on the calling
//! thread (free it with `fedssa_string_free`).
//!
//! Typical flow:
//! 1. `fedssa_config_from_json` (or `fedssa_config_default`)
//! 2. `fedssa_run`
//! 3. `fedssa_result_*` accessors / `fedssa_result_rounds_json`
//! 4. `fedssa_result_free`, `fedssa_config_free`

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use libc::c_char;

use fedssa_core::config::ExperimentConfig;
use fedssa_core::metrics::json_string;
use fedssa_core::protocol::StabilizationSchedule;
use fedssa_core::runner::{run_experiment, ExperimentResult};

/// Status of a C-API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedssaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    RuntimeError = 4,
    OutOfRange = 5,
}

/// Opaque experiment configuration handle.
pub struct FedssaConfig(ExperimentConfig);

/// Opaque result handle for a completed run.
pub struct FedssaRunResult(ExperimentResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: impl Into<Vec<u8>>) {
    let cstring = CString::new(message).unwrap_or_else(|_| {
        CString::new("error message contained interior NUL").expect("static message")
    });
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

fn fail(status: FedssaStatus, message: impl Into<Vec<u8>>) -> FedssaStatus {
    set_last_error(message);
    status
}

/// Most recent error message on this thread, or NULL. Caller frees the
/// returned string with `fedssa_string_free`.
#[no_mangle]
pub extern "C" fn fedssa_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by a `fedssa_*` function that
/// documents this deallocator, or NULL.
#[no_mangle]
pub unsafe extern "C" fn fedssa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a configuration from a JSON document (same schema as the CLI
/// config file; missing keys take their defaults).
///
/// # Safety
/// `json` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to write a handle into.
#[no_mangle]
pub unsafe extern "C" fn fedssa_config_from_json(
    json: *const c_char,
    out: *mut *mut FedssaConfig,
) -> FedssaStatus {
    if json.is_null() || out.is_null() {
        return fail(FedssaStatus::NullArgument, "json and out must be non-NULL");
    }
    let text = match CStr::from_ptr(json).to_str() {
        Ok(text) => text,
        Err(_) => return fail(FedssaStatus::InvalidUtf8, "config JSON is not valid UTF-8"),
    };
    let config: ExperimentConfig = match serde_json::from_str(text) {
        Ok(config) => config,
        Err(e) => return fail(FedssaStatus::InvalidConfig, format!("config parse error: {e}")),
    };
    if let Err(e) = config.validate() {
        return fail(FedssaStatus::InvalidConfig, e.to_string());
    }
    *out = Box::into_raw(Box::new(FedssaConfig(config)));
    FedssaStatus::Ok
}

/// Creates the all-defaults configuration.
///
/// # Safety
/// `out` must be a valid pointer to write a handle into.
#[no_mangle]
pub unsafe extern "C" fn fedssa_config_default(out: *mut *mut FedssaConfig) -> FedssaStatus {
    if out.is_null() {
        return fail(FedssaStatus::NullArgument, "out must be non-NULL");
    }
    *out = Box::into_raw(Box::new(FedssaConfig(ExperimentConfig::default())));
    FedssaStatus::Ok
}

/// Serializes a configuration back to JSON. Caller frees with
/// `fedssa_string_free`.
///
/// # Safety
/// `config` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn fedssa_config_to_json(config: *const FedssaConfig) -> *mut c_char {
    if config.is_null() {
        set_last_error("config must be non-NULL");
        return std::ptr::null_mut();
    }
    match serde_json::to_string(&(*config).0) {
        Ok(json) => CString::new(json).map_or(std::ptr::null_mut(), CString::into_raw),
        Err(e) => {
            set_last_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Frees a configuration handle.
///
/// # Safety
/// `config` must be a handle from this library, not yet freed, or NULL.
#[no_mangle]
pub unsafe extern "C" fn fedssa_config_free(config: *mut FedssaConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the experiment in memory (no files are written) and returns a
/// result handle.
///
/// # Safety
/// `config` must be a live handle; `out` must be valid to write into.
#[no_mangle]
pub unsafe extern "C" fn fedssa_run(
    config: *const FedssaConfig,
    out: *mut *mut FedssaRunResult,
) -> FedssaStatus {
    if config.is_null() || out.is_null() {
        return fail(FedssaStatus::NullArgument, "config and out must be non-NULL");
    }
    let cfg = &(*config).0;
    let outcome = catch_unwind(AssertUnwindSafe(|| run_experiment(cfg)));
    match outcome {
        Ok(Ok(result)) => {
            *out = Box::into_raw(Box::new(FedssaRunResult(result)));
            FedssaStatus::Ok
        }
        Ok(Err(e)) => {
            let status = match e {
                fedssa_core::Error::Config { .. } => FedssaStatus::InvalidConfig,
                _ => FedssaStatus::RuntimeError,
            };
            fail(status, e.to_string())
        }
        Err(_) => fail(FedssaStatus::RuntimeError, "panic inside fedssa_run"),
    }
}

/// Number of completed rounds in the result.
///
/// # Safety
/// `result` must be a live handle; NULL yields 0.
#[no_mangle]
pub unsafe extern "C" fn fedssa_result_num_rounds(result: *const FedssaRunResult) -> usize {
    if result.is_null() {
        return 0;
    }
    (*result).0.records.len()
}

/// Mean test accuracy after round `round` (0-based). Writes NaN when no
/// client had a defined accuracy that round.
///
/// # Safety
/// `result` must be a live handle; `out` must be valid to write into.
#[no_mangle]
pub unsafe extern "C" fn fedssa_result_mean_accuracy(
    result: *const FedssaRunResult,
    round: usize,
    out: *mut f64,
) -> FedssaStatus {
    if result.is_null() || out.is_null() {
        return fail(FedssaStatus::NullArgument, "result and out must be non-NULL");
    }
    let records = &(*result).0.records;
    match records.get(round) {
        Some(record) => {
            *out = record.mean_accuracy.unwrap_or(f64::NAN);
            FedssaStatus::Ok
        }
        None => fail(
            FedssaStatus::OutOfRange,
            format!("round {round} out of range ({} rounds)", records.len()),
        ),
    }
}

/// Mean test accuracy after the final round (the initial-model accuracy
/// when the run had zero rounds). Writes NaN when undefined.
///
/// # Safety
/// `result` must be a live handle; `out` must be valid to write into.
#[no_mangle]
pub unsafe extern "C" fn fedssa_result_final_mean_accuracy(
    result: *const FedssaRunResult,
    out: *mut f64,
) -> FedssaStatus {
    if result.is_null() || out.is_null() {
        return fail(FedssaStatus::NullArgument, "result and out must be non-NULL");
    }
    *out = (*result).0.final_mean_accuracy().unwrap_or(f64::NAN);
    FedssaStatus::Ok
}

/// Total parameters transmitted over the whole run (uplink plus downlink).
///
/// # Safety
/// `result` must be a live handle; `out` must be valid to write into.
#[no_mangle]
pub unsafe extern "C" fn fedssa_result_cumulative_params(
    result: *const FedssaRunResult,
    out: *mut u64,
) -> FedssaStatus {
    if result.is_null() || out.is_null() {
        return fail(FedssaStatus::NullArgument, "result and out must be non-NULL");
    }
    *out = (*result).0.records.last().map_or(0, |r| r.cum_params);
    FedssaStatus::Ok
}

/// Total estimated FLOPs over the whole run.
///
/// # Safety
/// `result` must be a live handle; `out` must be valid to write into.
#[no_mangle]
pub unsafe extern "C" fn fedssa_result_cumulative_flops(
    result: *const FedssaRunResult,
    out: *mut u64,
) -> FedssaStatus {
    if result.is_null() || out.is_null() {
        return fail(FedssaStatus::NullArgument, "result and out must be non-NULL");
    }
    *out = (*result).0.records.last().map_or(0, |r| r.cum_flops);
    FedssaStatus::Ok
}

/// The round log as a JSON array (same rows as the CLI's JSON emitter).
/// Caller frees with `fedssa_string_free`; returns NULL on error.
///
/// # Safety
/// `result` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn fedssa_result_rounds_json(
    result: *const FedssaRunResult,
) -> *mut c_char {
    if result.is_null() {
        set_last_error("result must be non-NULL");
        return std::ptr::null_mut();
    }
    match json_string(&(*result).0.records) {
        Ok(json) => CString::new(json).map_or(std::ptr::null_mut(), CString::into_raw),
        Err(e) => {
            set_last_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Frees a result handle.
///
/// # Safety
/// `result` must be a handle from this library, not yet freed, or NULL.
#[no_mangle]
pub unsafe extern "C" fn fedssa_result_free(result: *mut FedssaRunResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// The stabilization coefficient `mu(t)` for the given schedule. Returns
/// NaN when `mu0` lies outside `[0, 1]`.
#[no_mangle]
pub extern "C" fn fedssa_mu_schedule(mu0: f64, t_stable: u64, t: u64) -> f64 {
    match StabilizationSchedule::new(mu0, t_stable as usize) {
        Ok(schedule) => schedule.mu(t as usize),
        Err(_) => f64::NAN,
    }
}
