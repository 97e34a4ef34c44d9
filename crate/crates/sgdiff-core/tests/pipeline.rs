//! End-to-end pipeline and CLI checks: artifacts of one stage feed the next,
//! runs are idempotent under a fixed seed, and the CLI honors the documented
//! exit codes.

#![allow(clippy::field_reassign_with_default, clippy::needless_range_loop)]

use std::path::Path;
use std::process::Command;

use sgdiff_core::config::{apply_overrides, ExperimentConfig, ModelKind};
use sgdiff_core::error::Error;
use sgdiff_core::exp;
use sgdiff_core::ledger::PassLedger;
use sgdiff_core::model::{Cond, NoisePredictor};
use sgdiff_core::sampler::{sample, SampleOptions};
use sgdiff_core::schedule::{NoiseSchedule, ScheduleKind, TimestepGrid};

fn small_blocknet_config(root: &Path, name: &str) -> ExperimentConfig {
    let mut table: toml::Table = "".parse().unwrap();
    apply_overrides(
        &mut table,
        &[
            ("model.kind".into(), "\"blocknet\"".into()),
            ("grid.steps".into(), "20".into()),
            ("grid.t_ref".into(), "100".into()),
            ("evo.population".into(), "6".into()),
            ("evo.generations".into(), "3".into()),
            ("evo.n_probes".into(), "4".into()),
            ("cache.calib_runs".into(), "2".into()),
            ("ranks.eval_probes".into(), "2".into()),
            ("ranks.max_sweeps".into(), "1".into()),
            ("eval.n_samples".into(), "64".into()),
        ],
    )
    .unwrap();
    let mut cfg = ExperimentConfig::from_table(table).unwrap();
    cfg.out_dir = root.to_path_buf();
    cfg.name = name.into();
    cfg
}

#[test]
fn stage_artifacts_chain_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_blocknet_config(tmp.path(), "chain");
    let dir = tmp.path().join("chain");

    exp::run_optimize_schedule(&cfg).unwrap();
    let schedule = dir.join("schedule.json");
    assert!(schedule.exists());
    assert!(dir.join("search_log.jsonl").exists());

    exp::run_fit_calibration(&cfg, Some(&schedule)).unwrap();
    let bank = dir.join("bank.json");
    assert!(bank.exists());

    exp::run_optimize_ranks(&cfg, &schedule, &bank).unwrap();
    let ranks = dir.join("ranks.json");
    assert!(ranks.exists());

    let report = exp::run_bench(&cfg, Some(&schedule), Some(&bank), Some(&ranks)).unwrap();
    assert_eq!(report.runs.len(), 3);
    // pass identity holds for every benchmark run
    for run in &report.runs {
        let total = run.total_forward_passes.unwrap();
        let cfg_steps = run.cfg_steps.unwrap();
        let n = 64u64;
        assert_eq!(total, n * (run.steps as u64 + cfg_steps), "run {}", run.label);
    }
    // bench report carries the MAC fractions
    assert!(report.extra["mac_fraction_schedule_full"].is_number());
    assert!(report.extra["mac_fraction_schedule_cached"].is_number());
}

#[test]
fn fixed_seed_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let cfg = small_blocknet_config(tmp.path(), name);
        exp::run_optimize_schedule(&cfg).unwrap();
        std::fs::read(tmp.path().join(name).join("schedule.json")).unwrap()
    };
    let a = run("rep1");
    let b = run("rep2");
    assert_eq!(a, b, "same seed must produce byte-identical schedule files");
}

#[test]
fn search_log_has_one_record_per_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_blocknet_config(tmp.path(), "logcheck");
    cfg.evo.generations = 1;
    exp::run_optimize_schedule(&cfg).unwrap();
    let log = std::fs::read_to_string(tmp.path().join("logcheck").join("search_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["g", "best_fitness", "mean_fitness", "mse_best", "sigma_noise", "active_steps_best"] {
        assert!(rec.get(key).is_some(), "search log record missing {key}");
    }
}

#[test]
fn sample_writes_expected_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = tmp.path().to_path_buf();
    cfg.name = "sample-art".into();
    cfg.eval.n_samples = 128;
    cfg.grid.steps = 10;
    let report = exp::run_sample(&cfg, None).unwrap();
    let dir = tmp.path().join("sample-art");
    assert!(dir.join("trajectory.csv").exists());
    assert!(dir.join("samples_hist.csv").exists());
    assert!(dir.join("report.json").exists());
    assert!(dir.join("config_echo.json").exists());
    // ledger export carries the named counts
    let ledger: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("ledger.json")).unwrap()).unwrap();
    for key in ["cond_passes", "uncond_passes", "cached_blocks", "calibrated_blocks", "mac_estimate"] {
        assert!(ledger.get(key).is_some(), "ledger missing {key}");
    }
    // trajectory CSV: header + T+1 state rows
    let csv = std::fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10 + 1);
    assert!(csv.lines().next().unwrap().starts_with("step_index,timestep,component_0"));
    // report round-trips unchanged
    let text = serde_json::to_string(&report).unwrap();
    let back: sgdiff_core::report::ExperimentReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
}

#[test]
fn single_step_trajectory_has_two_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = tmp.path().to_path_buf();
    cfg.name = "one-step".into();
    cfg.grid.steps = 1;
    cfg.eval.n_samples = 16;
    exp::run_sample(&cfg, None).unwrap();
    let csv = std::fs::read_to_string(tmp.path().join("one-step").join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3); // header + x_T + x_0
}

struct DivergentModel;
impl NoisePredictor for DivergentModel {
    fn dim(&self) -> usize {
        1
    }
    fn predict(&mut self, _x: &[f64], _t: u32, _c: Cond, _l: &mut PassLedger) -> sgdiff_core::Result<Vec<f64>> {
        Ok(vec![f64::NAN])
    }
}

#[test]
fn divergence_reports_offending_timestep() {
    let sched = NoiseSchedule::build(ScheduleKind::LinearBeta, 100, (1e-4, 0.02)).unwrap();
    let grid = TimestepGrid::uniform(5, 100).unwrap();
    let g = sgdiff_core::guidance::GuidanceSchedule::constant(5, 1.5, 0.15, 3.0).unwrap();
    let mut model = DivergentModel;
    let err = sample(&mut model, &[0.0], 0, &grid, &g, &sched, &SampleOptions::default()).unwrap_err();
    match err {
        Error::NumericalDivergence { timestep, .. } => assert_eq!(timestep, 100),
        other => panic!("expected divergence, got {other}"),
    }
}

// --- CLI process-level checks -------------------------------------------

fn sgdiff_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sgdiff"))
}

#[test]
fn cli_malformed_config_key_exits_2_and_names_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("bad.toml");
    std::fs::write(&cfg_path, "grid = { stepz = 10 }\n").unwrap();
    let out = sgdiff_bin()
        .args(["sample", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stepz"), "stderr should name the bad key: {stderr}");
}

#[test]
fn cli_sample_runs_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sgdiff_bin()
        .args([
            "sample",
            "--set",
            "grid.steps=5",
            "--set",
            "eval.n_samples=32",
            "--set",
            "name=\"cli-smoke\"",
            "--out",
        ])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("cli-smoke").join("report.json").exists());
}

#[test]
fn cli_optimize_schedule_deterministic_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = sgdiff_bin()
            .args([
                "optimize-schedule",
                "--seed",
                "3",
                "--set",
                "grid.steps=6",
                "--set",
                "grid.t_ref=30",
                "--set",
                "evo.population=4",
                "--set",
                "evo.generations=2",
                "--set",
                "evo.n_probes=2",
                "--set",
                &format!("name=\"{name}\""),
                "--out",
            ])
            .arg(tmp.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(tmp.path().join(name).join("schedule.json")).unwrap()
    };
    assert_eq!(run("det1"), run("det2"));
}

#[test]
fn mixture_requires_mixture_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = tmp.path().to_path_buf();
    assert!(matches!(cfg.model.kind, ModelKind::Mixture));
    // calibration demands the block model
    let err = exp::run_fit_calibration(&cfg, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
