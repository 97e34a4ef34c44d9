//! C ABI over the sparse-guidance diffusion testbed.
//!
//! Conventions: opaque handles own their Rust state and must be released
//! with the matching `_free` function; every fallible call returns an
//! [`SgStatus`] and leaves a message retrievable via
//! [`sg_last_error_message`] on failure. Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use sgdiff_core::config::{apply_overrides, ExperimentConfig};
use sgdiff_core::error::Error;
use sgdiff_core::exp;
use sgdiff_core::guidance::GuidanceSchedule;
use sgdiff_core::metrics::wasserstein_1d;
use sgdiff_core::sampler::{draw_prior, sample_batch, SampleOptions};

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    NumericalError = 4,
    IoError = 5,
    BufferTooSmall = 6,
    InternalError = 7,
}

/// Pipeline stage selector for `sg_run_stage`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStage {
    Sample = 0,
    OptimizeSchedule = 1,
    FitCalibration = 2,
    OptimizeRanks = 3,
    ReproFig2 = 4,
    Bench = 5,
}

/// Opaque experiment configuration handle.
pub struct SgConfig {
    table: toml::Table,
    parsed: ExperimentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(cleaned).unwrap());
}

fn status_for(err: &Error) -> SgStatus {
    match err {
        Error::Config(_) | Error::Serde(_) | Error::Dimension(_) => SgStatus::ConfigError,
        Error::NumericalDivergence { .. } | Error::InvalidSigma { .. } | Error::SingularFit(_) => {
            SgStatus::NumericalError
        }
        Error::Io(_) => SgStatus::IoError,
    }
}

fn fail(err: &Error) -> SgStatus {
    set_error(&err.to_string());
    status_for(err)
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, SgStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(SgStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        SgStatus::InvalidUtf8
    })
}

unsafe fn opt_path(ptr: *const c_char) -> Result<Option<PathBuf>, SgStatus> {
    if ptr.is_null() {
        Ok(None)
    } else {
        Ok(Some(PathBuf::from(cstr_arg(ptr)?)))
    }
}

/// Version string of the library; static storage, do not free.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread; valid until the next
/// failing call. Do not free.
#[no_mangle]
pub extern "C" fn sg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Fresh configuration with every field at its default.
#[no_mangle]
pub extern "C" fn sg_config_new() -> *mut SgConfig {
    let table = toml::Table::new();
    let parsed = ExperimentConfig::default();
    Box::into_raw(Box::new(SgConfig { table, parsed }))
}

fn build_config(table: toml::Table, out: *mut *mut SgConfig) -> SgStatus {
    match ExperimentConfig::from_table(table.clone()) {
        Ok(parsed) => {
            unsafe { *out = Box::into_raw(Box::new(SgConfig { table, parsed })) };
            SgStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Parse a TOML config file into a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_config_from_file(path: *const c_char, out: *mut *mut SgConfig) -> SgStatus {
    if out.is_null() {
        set_error("null output pointer");
        return SgStatus::NullArgument;
    }
    let path = match cstr_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            set_error(&format!("cannot read {path}: {e}"));
            return SgStatus::IoError;
        }
    };
    let table: toml::Table = match text.parse() {
        Ok(t) => t,
        Err(e) => {
            set_error(&format!("config parse error: {e}"));
            return SgStatus::ConfigError;
        }
    };
    build_config(table, out)
}

/// Parse TOML text into a new handle.
///
/// # Safety
/// `text` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_config_from_toml(text: *const c_char, out: *mut *mut SgConfig) -> SgStatus {
    if out.is_null() {
        set_error("null output pointer");
        return SgStatus::NullArgument;
    }
    let text = match cstr_arg(text) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let table: toml::Table = match text.parse() {
        Ok(t) => t,
        Err(e) => {
            set_error(&format!("config parse error: {e}"));
            return SgStatus::ConfigError;
        }
    };
    build_config(table, out)
}

/// Set one dotted key (e.g. "grid.steps") to a TOML literal (e.g. "25",
/// "\"name\"", "true"). Validation happens immediately.
///
/// # Safety
/// `cfg` must be a live handle from this library; `key`/`value` valid
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sg_config_set(
    cfg: *mut SgConfig,
    key: *const c_char,
    value: *const c_char,
) -> SgStatus {
    if cfg.is_null() {
        set_error("null config handle");
        return SgStatus::NullArgument;
    }
    let (key, value) = match (cstr_arg(key), cstr_arg(value)) {
        (Ok(k), Ok(v)) => (k, v),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    let cfg = &mut *cfg;
    let mut table = cfg.table.clone();
    if let Err(e) = apply_overrides(&mut table, &[(key.to_string(), value.to_string())]) {
        return fail(&e);
    }
    match ExperimentConfig::from_table(table.clone()) {
        Ok(parsed) => {
            cfg.table = table;
            cfg.parsed = parsed;
            SgStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Serialize the effective configuration as TOML into `buf`. `written`
/// receives the full length (excluding NUL) even when the buffer is too
/// small.
///
/// # Safety
/// `cfg` must be a live handle; `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sg_config_to_toml(
    cfg: *const SgConfig,
    buf: *mut c_char,
    cap: usize,
    written: *mut usize,
) -> SgStatus {
    if cfg.is_null() || written.is_null() {
        set_error("null argument");
        return SgStatus::NullArgument;
    }
    let text = match toml::to_string(&(*cfg).parsed) {
        Ok(t) => t,
        Err(e) => {
            set_error(&format!("serialize error: {e}"));
            return SgStatus::InternalError;
        }
    };
    *written = text.len();
    if buf.is_null() || cap < text.len() + 1 {
        set_error("output buffer too small");
        return SgStatus::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
    *buf.add(text.len()) = 0;
    SgStatus::Ok
}

/// Release a configuration handle.
///
/// # Safety
/// `cfg` must be a handle from this library, not yet freed; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sg_config_free(cfg: *mut SgConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

fn run_stage_inner(
    cfg: &ExperimentConfig,
    stage: SgStage,
    schedule: Option<&Path>,
    bank: Option<&Path>,
    ranks: Option<&Path>,
) -> Result<(), Error> {
    exp::install_workers(cfg.workers);
    match stage {
        SgStage::Sample => exp::run_sample(cfg, schedule).map(drop),
        SgStage::OptimizeSchedule => exp::run_optimize_schedule(cfg).map(drop),
        SgStage::FitCalibration => exp::run_fit_calibration(cfg, schedule).map(drop),
        SgStage::OptimizeRanks => {
            let schedule = schedule.ok_or_else(|| {
                Error::Config("optimize-ranks needs a schedule path".into())
            })?;
            let bank = bank
                .ok_or_else(|| Error::Config("optimize-ranks needs a bank path".into()))?;
            exp::run_optimize_ranks(cfg, schedule, bank).map(drop)
        }
        SgStage::ReproFig2 => exp::run_repro_fig2(cfg).map(drop),
        SgStage::Bench => exp::run_bench(cfg, schedule, bank, ranks).map(drop),
    }
}

/// Run one pipeline stage; artifacts are written under
/// `<out_dir>/<name>/` exactly as the CLI writes them. Optional paths may be
/// null where a stage does not need them.
///
/// # Safety
/// `cfg` must be a live handle; path arguments must be null or valid
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sg_run_stage(
    cfg: *const SgConfig,
    stage: SgStage,
    schedule_path: *const c_char,
    bank_path: *const c_char,
    ranks_path: *const c_char,
) -> SgStatus {
    if cfg.is_null() {
        set_error("null config handle");
        return SgStatus::NullArgument;
    }
    let (schedule, bank, ranks) = match (
        opt_path(schedule_path),
        opt_path(bank_path),
        opt_path(ranks_path),
    ) {
        (Ok(s), Ok(b), Ok(r)) => (s, b, r),
        (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
    };
    match run_stage_inner(
        &(*cfg).parsed,
        stage,
        schedule.as_deref(),
        bank.as_deref(),
        ranks.as_deref(),
    ) {
        Ok(()) => SgStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Sample `n` final outputs from the configured mixture model under a
/// constant guidance schedule, filling `out` with n * data_dim doubles in
/// sample-major order.
///
/// # Safety
/// `cfg` must be a live handle; `out` must point to `out_len` writable
/// doubles with `out_len >= n * data_dim`.
#[no_mangle]
pub unsafe extern "C" fn sg_sample_final(
    cfg: *const SgConfig,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> SgStatus {
    if cfg.is_null() || out.is_null() {
        set_error("null argument");
        return SgStatus::NullArgument;
    }
    let cfg = &(*cfg).parsed;
    let inner = || -> Result<Vec<Vec<f64>>, Error> {
        let model = cfg.mixture_model()?;
        let grid = cfg.sample_grid()?;
        let gsched = GuidanceSchedule::constant(
            grid.len(),
            cfg.guidance.w_const,
            cfg.guidance.tau,
            cfg.guidance.w_max,
        )?;
        let priors = draw_prior(n, model.marginal().dim(), exp::derive_seed(cfg.seed, 1));
        let x0s: Vec<(Vec<f64>, usize)> =
            priors.into_iter().map(|x| (x, cfg.eval.eval_class)).collect();
        let opts = SampleOptions { record_states: false, ..Default::default() };
        let (finals, _) =
            sample_batch(|| model.clone(), &x0s, &grid, &gsched, model.schedule(), &opts)?;
        Ok(finals)
    };
    match inner() {
        Ok(finals) => {
            let dim = finals.first().map(|v| v.len()).unwrap_or(0);
            if out_len < n * dim {
                set_error(&format!("need {} doubles, got {out_len}", n * dim));
                return SgStatus::BufferTooSmall;
            }
            for (i, v) in finals.iter().enumerate() {
                for (j, &x) in v.iter().enumerate() {
                    *out.add(i * dim + j) = x;
                }
            }
            SgStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Exact 1D Wasserstein-1 distance between two sample buffers.
///
/// # Safety
/// `a` and `b` must point to `len_a`/`len_b` readable doubles; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_wasserstein_1d(
    a: *const f64,
    len_a: usize,
    b: *const f64,
    len_b: usize,
    out: *mut f64,
) -> SgStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        set_error("null argument");
        return SgStatus::NullArgument;
    }
    if len_a == 0 || len_b == 0 {
        set_error("empty sample buffer");
        return SgStatus::ConfigError;
    }
    let sa = std::slice::from_raw_parts(a, len_a);
    let sb = std::slice::from_raw_parts(b, len_b);
    *out = wasserstein_1d(sa, sb);
    SgStatus::Ok
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(sg_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut out: *mut SgConfig = ptr::null_mut();
        assert_eq!(
            unsafe { sg_config_from_file(ptr::null(), &mut out) },
            SgStatus::NullArgument
        );
        assert_eq!(
            unsafe { sg_wasserstein_1d(ptr::null(), 1, ptr::null(), 1, ptr::null_mut()) },
            SgStatus::NullArgument
        );
    }
}
