// SPDX-License-Identifier: Apache-2.0

//! C ABI over `kgsim`. Scenarios and reports are opaque handles owned by the
//! caller and released with the matching `_free`. Every fallible call returns a
//! [`KgsimStatus`]; on failure [`kgsim_last_error`] describes it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kgsim::metrics::{percentile, write_reports, Report};
use kgsim::scenario::{self, parse_scenario, parse_scenario_str, preset_scenario, RunOptions, Scenario, ScenarioError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KgsimStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    UnknownPreset = 4,
    Run = 5,
    Io = 6,
    InvalidArgument = 7,
    NotAvailable = 8,
    Panic = 9,
}

/// A parsed and validated scenario.
pub struct KgsimScenario {
    scenario: Scenario,
    seeds: Option<Vec<u64>>,
}

/// The result of running a scenario.
pub struct KgsimReport {
    report: Report,
    config_digest: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: KgsimStatus, msg: impl Into<String>) -> KgsimStatus {
    set_error(msg);
    status
}

fn scenario_status(e: &ScenarioError) -> KgsimStatus {
    match e {
        ScenarioError::UnknownPreset(_) => KgsimStatus::UnknownPreset,
        ScenarioError::Io { .. } => KgsimStatus::Io,
        ScenarioError::Metrics(kgsim::metrics::MetricsError::Io { .. })
        | ScenarioError::Metrics(kgsim::metrics::MetricsError::Csv { .. }) => KgsimStatus::Io,
        e if e.is_config() => KgsimStatus::Config,
        _ => KgsimStatus::Run,
    }
}

fn guard(f: impl FnOnce() -> KgsimStatus) -> KgsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(KgsimStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, KgsimStatus> {
    if p.is_null() {
        return Err(fail(KgsimStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KgsimStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn emit_scenario(s: Scenario, out: *mut *mut KgsimScenario) -> KgsimStatus {
    if let Err(e) = s.validate() {
        return fail(scenario_status(&e), e.to_string());
    }
    *out = Box::into_raw(Box::new(KgsimScenario {
        scenario: s,
        seeds: None,
    }));
    KgsimStatus::Ok
}

macro_rules! try_arg {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($p:expr, $what:expr) => {
        if $p.is_null() {
            return fail(KgsimStatus::NullArgument, concat!($what, " is null"));
        }
    };
}

/// Message for the most recent failure on this thread, or null. Valid until the
/// next kgsim call on the same thread.
#[no_mangle]
pub extern "C" fn kgsim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version, static string.
#[no_mangle]
pub extern "C" fn kgsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of built-in presets.
#[no_mangle]
pub extern "C" fn kgsim_preset_count() -> usize {
    scenario::PRESETS.len()
}

/// Name of preset `index` as a static string, or null when out of range.
#[no_mangle]
pub extern "C" fn kgsim_preset_name(index: usize) -> *const c_char {
    static NAMES: std::sync::OnceLock<Vec<CString>> = std::sync::OnceLock::new();
    let names = NAMES.get_or_init(|| scenario::PRESETS.iter().map(|n| CString::new(*n).unwrap()).collect());
    names.get(index).map_or(ptr::null(), |s| s.as_ptr())
}

/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgsim_scenario_from_preset(name: *const c_char, out: *mut *mut KgsimScenario) -> KgsimStatus {
    guard(|| {
        non_null!(out, "out");
        let name = try_arg!(str_arg(name, "name"));
        match preset_scenario(name) {
            Some(s) => emit_scenario(s, out),
            None => {
                let e = ScenarioError::UnknownPreset(name.to_owned());
                fail(scenario_status(&e), e.to_string())
            }
        }
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgsim_scenario_from_file(path: *const c_char, out: *mut *mut KgsimScenario) -> KgsimStatus {
    guard(|| {
        non_null!(out, "out");
        let path = try_arg!(str_arg(path, "path"));
        match parse_scenario(Path::new(path)) {
            Ok(s) => emit_scenario(s, out),
            Err(e) => fail(scenario_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgsim_scenario_from_toml(toml: *const c_char, out: *mut *mut KgsimScenario) -> KgsimStatus {
    guard(|| {
        non_null!(out, "out");
        let text = try_arg!(str_arg(toml, "toml"));
        match parse_scenario_str(text) {
            Ok(s) => emit_scenario(s, out),
            Err(e) => fail(scenario_status(&e), e.to_string()),
        }
    })
}

/// Override the scenario's seeds for later runs.
///
/// # Safety
/// `scenario` must be a live handle; `seeds` must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn kgsim_scenario_set_seeds(
    scenario: *mut KgsimScenario,
    seeds: *const u64,
    len: usize,
) -> KgsimStatus {
    guard(|| {
        non_null!(scenario, "scenario");
        non_null!(seeds, "seeds");
        if len == 0 {
            return fail(KgsimStatus::InvalidArgument, "seed list is empty");
        }
        (*scenario).seeds = Some(std::slice::from_raw_parts(seeds, len).to_vec());
        KgsimStatus::Ok
    })
}

/// # Safety
/// `scenario` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kgsim_scenario_free(scenario: *mut KgsimScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Run a scenario, including any presets its assertions compare against.
///
/// # Safety
/// `scenario` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgsim_run(scenario: *const KgsimScenario, out: *mut *mut KgsimReport) -> KgsimStatus {
    guard(|| {
        non_null!(scenario, "scenario");
        non_null!(out, "out");
        let s = &*scenario;
        let opts = RunOptions {
            seeds: s.seeds.clone(),
            ..RunOptions::default()
        };
        match scenario::run_with_assertions(&s.scenario, &opts) {
            Ok(report) => {
                let config_digest = CString::new(report.config_digest.clone()).unwrap_or_default();
                *out = Box::into_raw(Box::new(KgsimReport { report, config_digest }));
                KgsimStatus::Ok
            }
            Err(e) => fail(scenario_status(&e), e.to_string()),
        }
    })
}

/// Write the CSV, summary and resolved-scenario files into `dir`, creating it.
///
/// # Safety
/// `report` must be a live handle; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kgsim_report_write(report: *const KgsimReport, dir: *const c_char) -> KgsimStatus {
    guard(|| {
        non_null!(report, "report");
        let dir = try_arg!(str_arg(dir, "dir"));
        match write_reports(&(*report).report, Path::new(dir)) {
            Ok(_) => KgsimStatus::Ok,
            Err(e) => fail(KgsimStatus::Io, e.to_string()),
        }
    })
}

/// Count assertions and failures. Either output may be null.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn kgsim_report_assertions(
    report: *const KgsimReport,
    total: *mut usize,
    failed: *mut usize,
) -> KgsimStatus {
    guard(|| {
        non_null!(report, "report");
        let a = &(*report).report.assertions;
        if !total.is_null() {
            *total = a.len();
        }
        if !failed.is_null() {
            *failed = a.iter().filter(|(_, ok, _)| !ok).count();
        }
        KgsimStatus::Ok
    })
}

/// Median makespan across seeds. `KGSIM_STATUS_NOT_AVAILABLE` for serving scenarios.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgsim_report_makespan_median_ms(report: *const KgsimReport, out: *mut u64) -> KgsimStatus {
    guard(|| {
        non_null!(report, "report");
        non_null!(out, "out");
        match &(*report).report.batch_summary {
            Some(b) => {
                *out = b.makespan_median_ms;
                KgsimStatus::Ok
            }
            None => fail(KgsimStatus::NotAvailable, "scenario has no batch results"),
        }
    })
}

/// Hex SHA-256 of the resolved scenario; owned by the report.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kgsim_report_config_digest(report: *const KgsimReport) -> *const c_char {
    if report.is_null() {
        return ptr::null();
    }
    (*report).config_digest.as_ptr()
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kgsim_report_free(report: *mut KgsimReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Nearest-rank percentile of `len` samples, `p` in (0, 100].
///
/// # Safety
/// `samples` must point to `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kgsim_percentile(samples: *const f64, len: usize, p: f64, out: *mut f64) -> KgsimStatus {
    guard(|| {
        non_null!(out, "out");
        if samples.is_null() && len > 0 {
            return fail(KgsimStatus::NullArgument, "samples is null");
        }
        let xs = if len == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(samples, len)
        };
        match percentile(xs, p) {
            Ok(v) => {
                *out = v;
                KgsimStatus::Ok
            }
            Err(e) => fail(KgsimStatus::InvalidArgument, e.to_string()),
        }
    })
}
