//! Exercises the C ABI through the extern "C" surface the header exposes.

use std::ffi::{CStr, CString};
use std::ptr;

use sgdiff_ffi::*;

fn cstring(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(sg_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn config_lifecycle_and_overrides() {
    let cfg = sg_config_new();
    assert!(!cfg.is_null());
    unsafe {
        let k = cstring("grid.steps");
        let v = cstring("12");
        assert_eq!(sg_config_set(cfg, k.as_ptr(), v.as_ptr()), SgStatus::Ok);

        // invalid values are rejected with a named key in the message
        let bad_k = cstring("grid.stepz");
        assert_eq!(
            sg_config_set(cfg, bad_k.as_ptr(), v.as_ptr()),
            SgStatus::ConfigError
        );
        assert!(last_error().contains("stepz"), "got: {}", last_error());

        // serialize round trip reflects the accepted override
        let mut needed = 0usize;
        assert_eq!(
            sg_config_to_toml(cfg, ptr::null_mut(), 0, &mut needed),
            SgStatus::BufferTooSmall
        );
        let mut buf = vec![0i8; needed + 1];
        assert_eq!(
            sg_config_to_toml(cfg, buf.as_mut_ptr(), buf.len(), &mut needed),
            SgStatus::Ok
        );
        let text = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert!(text.contains("steps = 12"), "toml: {text}");
        sg_config_free(cfg);
    }
}

#[test]
fn from_toml_rejects_unknown_keys() {
    let text = cstring("grid = { stepz = 5 }");
    let mut out: *mut SgConfig = ptr::null_mut();
    let status = unsafe { sg_config_from_toml(text.as_ptr(), &mut out) };
    assert_eq!(status, SgStatus::ConfigError);
    assert!(out.is_null());
    assert!(last_error().contains("stepz"));
}

#[test]
fn sample_final_fills_buffer() {
    let cfg = sg_config_new();
    unsafe {
        let k = cstring("grid.steps");
        let v = cstring("10");
        assert_eq!(sg_config_set(cfg, k.as_ptr(), v.as_ptr()), SgStatus::Ok);
        let n = 64usize;
        let mut out = vec![0.0f64; n];
        assert_eq!(
            sg_sample_final(cfg, n, out.as_mut_ptr(), out.len()),
            SgStatus::Ok
        );
        assert!(out.iter().all(|v| v.is_finite()));
        // a tiny buffer is refused
        let mut small = vec![0.0f64; 3];
        assert_eq!(
            sg_sample_final(cfg, n, small.as_mut_ptr(), small.len()),
            SgStatus::BufferTooSmall
        );
        sg_config_free(cfg);
    }
}

#[test]
fn run_stage_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = sg_config_new();
    unsafe {
        for (k, v) in [
            ("out_dir", format!("{:?}", tmp.path().display().to_string())),
            ("name", "\"ffi-run\"".into()),
            ("grid.steps", "8".into()),
            ("eval.n_samples", "32".into()),
        ] {
            let k = cstring(k);
            let v = cstring(&v);
            assert_eq!(sg_config_set(cfg, k.as_ptr(), v.as_ptr()), SgStatus::Ok, "{}", last_error());
        }
        assert_eq!(
            sg_run_stage(cfg, SgStage::Sample, ptr::null(), ptr::null(), ptr::null()),
            SgStatus::Ok,
            "{}",
            last_error()
        );
        sg_config_free(cfg);
    }
    assert!(tmp.path().join("ffi-run").join("report.json").exists());
    assert!(tmp.path().join("ffi-run").join("trajectory.csv").exists());
}

#[test]
fn optimize_ranks_requires_paths() {
    let cfg = sg_config_new();
    let status = unsafe {
        sg_run_stage(cfg, SgStage::OptimizeRanks, ptr::null(), ptr::null(), ptr::null())
    };
    assert_eq!(status, SgStatus::ConfigError);
    assert!(last_error().contains("schedule"));
    unsafe { sg_config_free(cfg) };
}

#[test]
fn wasserstein_matches_library() {
    let a = [0.0, 1.0, 2.0];
    let b = [0.5, 1.5, 2.5];
    let mut out = 0.0f64;
    let status = unsafe { sg_wasserstein_1d(a.as_ptr(), 3, b.as_ptr(), 3, &mut out) };
    assert_eq!(status, SgStatus::Ok);
    assert!((out - 0.5).abs() < 1e-15);
}

#[test]
fn generated_header_exists_with_expected_symbols() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("sgdiff.h");
    let text = std::fs::read_to_string(&header)
        .unwrap_or_else(|e| panic!("missing generated header {}: {e}", header.display()));
    for sym in [
        "sg_config_new",
        "sg_config_from_file",
        "sg_config_set",
        "sg_config_free",
        "sg_run_stage",
        "sg_sample_final",
        "sg_wasserstein_1d",
        "sg_last_error_message",
        "typedef struct SgConfig SgConfig",
    ] {
        assert!(text.contains(sym), "header missing `{sym}`");
    }
}
