//! Pipeline drivers behind the CLI subcommands (and the C API): each stage
//! reads the shared config, writes its artifacts under out/<name>/, and the
//! artifacts of one stage are sufficient inputs for the next.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use serde_json::json;

use crate::blocknet::BlockNetPredictor;
use crate::cache::CachedBlockNet;
use crate::calib::{collect_calibration_data, BankJson, CalibRun, CalibrationBank};
use crate::config::{ExperimentConfig, ModelKind};
use crate::error::{Error, Result};
use crate::evo::{optimize_schedule, ProbeSet};
use crate::guidance::{GuidanceSchedule, ScheduleFile};
use crate::ledger::PassLedger;
use crate::metrics::{count_passes, wasserstein_to_density, write_density_csv, DistReport, Histogram};
use crate::mixture::{mixture_guided_target, GridDensity, MixtureModel};
use crate::ranksearch::{optimize_ranks, quality_objective, ObjectiveSetup, RankConfigFile};
use crate::report::{assemble_report, ExperimentReport, RunSummary};
use crate::sampler::{draw_prior, sample, sample_batch, SampleOptions};
use crate::schedule::TimestepGrid;

/// Derive a decorrelated stream seed from the experiment seed (splitmix64).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Configure the rayon pool once; 0 keeps the default (available
/// parallelism). Later calls are no-ops.
pub fn install_workers(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(&cfg.name);
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("config_echo.json"), &cfg.echo_json())?;
    Ok(dir)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn load_schedule(path: &Path, t_max: u32) -> Result<(GuidanceSchedule, TimestepGrid)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read schedule {}: {e}", path.display())))?;
    let file: ScheduleFile = serde_json::from_str(&text)?;
    Ok((file.schedule()?, file.grid(t_max)?))
}

fn guided_target(cfg: &ExperimentConfig, model: &MixtureModel) -> Result<GridDensity> {
    mixture_guided_target(
        model.class(cfg.eval.eval_class),
        model.marginal(),
        cfg.guidance.w_const,
        cfg.eval.density_lo,
        cfg.eval.density_hi,
        cfg.eval.density_points,
        model.schedule(),
    )
}

struct MixturePanel {
    finals: Vec<f64>,
    ledger: PassLedger,
    w1: f64,
}

/// Run one mixture pipeline over the shared prior draws and measure W1 to
/// the analytic target.
fn mixture_panel(
    model: &MixtureModel,
    x0s: &[(Vec<f64>, usize)],
    grid: &TimestepGrid,
    gsched: &GuidanceSchedule,
    target: &GridDensity,
) -> Result<MixturePanel> {
    let opts = SampleOptions { record_states: false, ..Default::default() };
    let (finals, ledger) = sample_batch(
        || model.clone(),
        x0s,
        grid,
        gsched,
        model.schedule(),
        &opts,
    )?;
    let xs: Vec<f64> = finals.iter().map(|v| v[0]).collect();
    let w1 = wasserstein_to_density(&xs, target);
    Ok(MixturePanel { finals: xs, ledger, w1 })
}

fn panel_summary(label: &str, gsched: &GuidanceSchedule, panel: &MixturePanel, n: usize) -> RunSummary {
    let (_, cfg_steps) = count_passes(gsched);
    RunSummary {
        label: label.to_string(),
        steps: gsched.len(),
        cfg_steps: Some(cfg_steps),
        total_forward_passes: Some(panel.ledger.total_forward_passes()),
        dist: Some(DistReport {
            wasserstein1: Some(panel.w1),
            energy_distance: None,
            mse_to_reference: None,
            sample_count: n,
        }),
        ledger: Some(panel.ledger.export()),
    }
}

/// `sample`: run the sampler with a constant or file-loaded schedule; write
/// a showcase trajectory CSV, histogram, ledger, and report.
pub fn run_sample(cfg: &ExperimentConfig, schedule_path: Option<&Path>) -> Result<ExperimentReport> {
    let dir = prepare_out_dir(cfg)?;
    let t_max = cfg.noise.t_max;
    let (gsched, grid) = match schedule_path {
        Some(p) => load_schedule(p, t_max)?,
        None => {
            let grid = cfg.sample_grid()?;
            (
                GuidanceSchedule::constant(
                    grid.len(),
                    cfg.guidance.w_const,
                    cfg.guidance.tau,
                    cfg.guidance.w_max,
                )?,
                grid,
            )
        }
    };
    if cfg.model.kind != ModelKind::Mixture {
        return Err(Error::Config("sample currently drives the mixture model".into()));
    }
    let model = cfg.mixture_model()?;
    let target = if model.marginal().dim() == 1 { Some(guided_target(cfg, &model)?) } else { None };

    let priors = draw_prior(cfg.eval.n_samples, model.marginal().dim(), derive_seed(cfg.seed, 1));
    let x0s: Vec<(Vec<f64>, usize)> =
        priors.into_iter().map(|x| (x, cfg.eval.eval_class)).collect();

    // showcase trajectory from the first prior draw
    let mut m0 = model.clone();
    let traj = sample(
        &mut m0,
        &x0s[0].0,
        cfg.eval.eval_class,
        &grid,
        &gsched,
        model.schedule(),
        &SampleOptions::default(),
    )?;
    let traj_path = dir.join("trajectory.csv");
    traj.write_csv(&traj_path)?;

    let opts = SampleOptions { record_states: false, ..Default::default() };
    let (finals, ledger) =
        sample_batch(|| model.clone(), &x0s, &grid, &gsched, model.schedule(), &opts)?;
    let xs: Vec<f64> = finals.iter().map(|v| v[0]).collect();
    let w1 = target.as_ref().map(|t| wasserstein_to_density(&xs, t));

    let hist = Histogram::from_samples(&xs, cfg.eval.density_lo, cfg.eval.density_hi, cfg.eval.hist_bins);
    let hist_path = dir.join("samples_hist.csv");
    hist.write_csv(&hist_path)?;
    let ledger_path = dir.join("ledger.json");
    write_json(&ledger_path, &ledger.export())?;

    let (_, cfg_steps) = count_passes(&gsched);
    let report = assemble_report(
        &cfg.name,
        "sample",
        cfg.echo_json(),
        vec![RunSummary {
            label: "sample".into(),
            steps: grid.len(),
            cfg_steps: Some(cfg_steps),
            total_forward_passes: Some(ledger.total_forward_passes()),
            dist: Some(DistReport {
                wasserstein1: w1,
                energy_distance: None,
                mse_to_reference: None,
                sample_count: cfg.eval.n_samples,
            }),
            ledger: Some(ledger.export()),
        }],
        vec![
            rel(&dir, &traj_path),
            rel(&dir, &hist_path),
            rel(&dir, &ledger_path),
        ],
        serde_json::Value::Null,
    );
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// `optimize-schedule`: Stage-1 search; writes schedule.json and the
/// per-generation search log.
pub fn run_optimize_schedule(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let dir = prepare_out_dir(cfg)?;
    let grid = cfg.sample_grid()?;
    let ref_grid = cfg.ref_grid()?;
    let evo_cfg = cfg.evo_config();
    let probes = ProbeSet::draw(
        evo_cfg.n_probes,
        cfg.data_dim(),
        cfg.n_classes(),
        derive_seed(cfg.seed, 2),
    );
    let outcome = match cfg.model.kind {
        ModelKind::Mixture => {
            let model = cfg.mixture_model()?;
            let sched = model.schedule().clone();
            optimize_schedule(&evo_cfg, || model.clone(), &sched, &grid, &ref_grid, &probes)?
        }
        ModelKind::Blocknet => {
            let net = cfg.blocknet()?;
            let sched = cfg.noise_schedule()?;
            optimize_schedule(&evo_cfg, || BlockNetPredictor(&net), &sched, &grid, &ref_grid, &probes)?
        }
    };
    let sched_path = dir.join("schedule.json");
    write_json(&sched_path, &ScheduleFile::new(&outcome.schedule, &grid))?;
    let log_path = dir.join("search_log.jsonl");
    write_jsonl(&log_path, &outcome.log)?;

    let report = assemble_report(
        &cfg.name,
        "optimize-schedule",
        cfg.echo_json(),
        vec![RunSummary {
            label: "optimized".into(),
            steps: grid.len(),
            cfg_steps: Some(outcome.schedule.active_steps() as u64),
            total_forward_passes: None,
            dist: Some(DistReport {
                wasserstein1: None,
                energy_distance: None,
                mse_to_reference: Some(outcome.quality_loss),
                sample_count: probes.len(),
            }),
            ledger: None,
        }],
        vec![rel(&dir, &sched_path), rel(&dir, &log_path)],
        json!({
            "fitness": outcome.fitness,
            "sparsity_weight": outcome.lambda,
            "generations": outcome.log.len(),
        }),
    );
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// `fit-calibration`: full-compute runs with taps, ridge fit per layer;
/// writes bank.json.
pub fn run_fit_calibration(cfg: &ExperimentConfig, schedule_path: Option<&Path>) -> Result<ExperimentReport> {
    let dir = prepare_out_dir(cfg)?;
    if cfg.model.kind != ModelKind::Blocknet {
        return Err(Error::Config("fit-calibration needs model.kind = \"blocknet\"".into()));
    }
    let net = cfg.blocknet()?;
    let sched = cfg.noise_schedule()?;
    let (gsched, grid) = match schedule_path {
        Some(p) => load_schedule(p, cfg.noise.t_max)?,
        None => {
            let grid = cfg.sample_grid()?;
            (
                GuidanceSchedule::constant(
                    grid.len(),
                    cfg.guidance.w_const,
                    cfg.guidance.tau,
                    cfg.guidance.w_max,
                )?,
                grid,
            )
        }
    };
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let runs: Vec<CalibRun> = (0..cfg.cache.calib_runs)
        .map(|_| {
            let x_t: Vec<f64> = (0..net.config().data_dim)
                .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
                .collect();
            let class = rng.random_range(0..net.config().n_classes);
            CalibRun { x_t, class, gsched: gsched.clone() }
        })
        .collect();
    let policy = cfg.cache_policy();
    let incs = collect_calibration_data(&net, &runs, &policy, &grid, &sched)?;
    let bank = CalibrationBank::fit(&incs, cfg.cache.ridge)?;
    let bank_path = dir.join("bank.json");
    write_json(&bank_path, &bank.to_json())?;
    let model_path = dir.join("model.json");
    write_json(&model_path, &net.to_json())?;

    let stats: Vec<_> = (0..bank.n_layers())
        .map(|l| {
            let s = &bank.layer(l).stats;
            json!({
                "layer": l,
                "samples": s.samples,
                "residual_fro": s.residual_fro,
                "rank_deficient": s.rank_deficient,
            })
        })
        .collect();
    let report = assemble_report(
        &cfg.name,
        "fit-calibration",
        cfg.echo_json(),
        vec![],
        vec![rel(&dir, &bank_path), rel(&dir, &model_path)],
        json!({ "layers": stats, "ridge": cfg.cache.ridge, "runs": cfg.cache.calib_runs }),
    );
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// `optimize-ranks`: coordinate descent over region ranks against the
/// cached-vs-full proxy; writes ranks.json.
pub fn run_optimize_ranks(
    cfg: &ExperimentConfig,
    schedule_path: &Path,
    bank_path: &Path,
) -> Result<ExperimentReport> {
    let dir = prepare_out_dir(cfg)?;
    if cfg.model.kind != ModelKind::Blocknet {
        return Err(Error::Config("optimize-ranks needs model.kind = \"blocknet\"".into()));
    }
    let net = cfg.blocknet()?;
    let sched = cfg.noise_schedule()?;
    let (gsched, grid) = load_schedule(schedule_path, cfg.noise.t_max)?;
    let bank_text = std::fs::read_to_string(bank_path)
        .map_err(|e| Error::Config(format!("cannot read bank {}: {e}", bank_path.display())))?;
    let bank_json: BankJson = serde_json::from_str(&bank_text)?;
    let mut bank = CalibrationBank::from_json(&bank_json)?;

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 4));
    let probes: Vec<(Vec<f64>, usize)> = (0..cfg.ranks.eval_probes)
        .map(|_| {
            let x: Vec<f64> = (0..net.config().data_dim)
                .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
                .collect();
            (x, rng.random_range(0..net.config().n_classes))
        })
        .collect();
    let policy = cfg.cache_policy();
    let mut setup =
        ObjectiveSetup::new(&net, &mut bank, policy, &gsched, &grid, &sched, &probes, None)?;
    let n_blocks = net.n_blocks();
    let (r_min, r_max) = (cfg.ranks.r_min, cfg.ranks.r_max);
    let budget = cfg.ranks.budget;
    let outcome = optimize_ranks(
        |ranks| {
            let rc = crate::ranksearch::RankConfig::new(
                ranks.to_vec(),
                (r_min, r_max),
                budget,
                n_blocks,
            )?;
            quality_objective(&mut setup, &rc)
        },
        cfg.ranks.regions,
        (r_min, r_max),
        budget,
        n_blocks,
        cfg.ranks.max_sweeps,
    )?;

    let ranks_path = dir.join("ranks.json");
    write_json(&ranks_path, &RankConfigFile::new(&outcome.config))?;
    let report = assemble_report(
        &cfg.name,
        "optimize-ranks",
        cfg.echo_json(),
        vec![],
        vec![rel(&dir, &ranks_path)],
        json!({
            "objective": outcome.objective,
            "evaluations": outcome.evaluations,
            "moves": outcome.moves,
            "objective_trace": outcome.objective_trace,
            "unimodality_flags": outcome.unimodality_flags,
        }),
    );
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// The four-pipeline toy reproduction: long constant CFG, conditional-only,
/// random sparse (median of several draws), and the optimized sparse
/// schedule, all from identical prior noise, measured against the analytic
/// guided target.
pub fn run_repro_fig2(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let dir = prepare_out_dir(cfg)?;
    if cfg.model.kind != ModelKind::Mixture {
        return Err(Error::Config("repro-fig2 needs model.kind = \"mixture\"".into()));
    }
    let model = cfg.mixture_model()?;
    if model.marginal().dim() != 1 {
        return Err(Error::Config("repro-fig2 is a 1D experiment".into()));
    }
    let target = guided_target(cfg, &model)?;
    let grid = cfg.sample_grid()?;
    let long_grid = cfg.ref_grid()?;
    let (tau, w_max, w_const) = (cfg.guidance.tau, cfg.guidance.w_max, cfg.guidance.w_const);

    let priors = draw_prior(cfg.eval.n_samples, 1, derive_seed(cfg.seed, 1));
    let x0s: Vec<(Vec<f64>, usize)> =
        priors.into_iter().map(|x| (x, cfg.eval.eval_class)).collect();

    // (A) constant CFG on the long grid
    let g_const = GuidanceSchedule::constant(long_grid.len(), w_const, tau, w_max)?;
    let panel_a = mixture_panel(&model, &x0s, &long_grid, &g_const, &target)?;

    // (B) conditional-only on the short grid
    let g_cond = GuidanceSchedule::constant(grid.len(), 0.0, tau, w_max)?;
    let panel_b = mixture_panel(&model, &x0s, &grid, &g_cond, &target)?;

    // (C) random sparse schedules; the median-W1 run becomes the panel
    let k = cfg.fig2.active_steps;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 5));
    let mut random_runs = Vec::new();
    for _ in 0..cfg.fig2.random_schedules {
        let mut w = vec![0.0; grid.len()];
        let mut idx: Vec<usize> = (0..grid.len()).collect();
        for i in 0..k {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        for &i in &idx[..k] {
            w[i] = tau + (w_max - tau) * rng.random::<f64>();
        }
        let g = GuidanceSchedule::new(w, tau, w_max)?;
        let p = mixture_panel(&model, &x0s, &grid, &g, &target)?;
        random_runs.push((g, p));
    }
    let mut order: Vec<usize> = (0..random_runs.len()).collect();
    order.sort_by(|&a, &b| random_runs[a].1.w1.total_cmp(&random_runs[b].1.w1));
    let median_idx = order[(order.len().saturating_sub(1)) / 2];
    let random_w1s: Vec<f64> = random_runs.iter().map(|(_, p)| p.w1).collect();
    let random_median = random_runs[median_idx].1.w1;

    // (D) optimized sparse schedule from the Stage-1 search, capped to the
    // panel's active-step count
    let mut evo_cfg = cfg.evo_config();
    evo_cfg.target_active = Some(k);
    let probes = ProbeSet::draw(evo_cfg.n_probes, 1, cfg.n_classes(), derive_seed(cfg.seed, 2));
    let sched = model.schedule().clone();
    let outcome =
        optimize_schedule(&evo_cfg, || model.clone(), &sched, &grid, &long_grid, &probes)?;
    let panel_d = mixture_panel(&model, &x0s, &grid, &outcome.schedule, &target)?;

    // artifacts
    let mut artifacts = Vec::new();
    let sched_path = dir.join("schedule.json");
    write_json(&sched_path, &ScheduleFile::new(&outcome.schedule, &grid))?;
    artifacts.push(rel(&dir, &sched_path));
    let log_path = dir.join("search_log.jsonl");
    write_jsonl(&log_path, &outcome.log)?;
    artifacts.push(rel(&dir, &log_path));
    let target_path = dir.join("target_density.csv");
    write_density_csv(&target, &target_path)?;
    artifacts.push(rel(&dir, &target_path));
    let (lo, hi, bins) = (cfg.eval.density_lo, cfg.eval.density_hi, cfg.eval.hist_bins);
    for (stem, panel) in [
        ("panel_constant_cfg", &panel_a),
        ("panel_conditional_only", &panel_b),
        ("panel_random_sparse", &random_runs[median_idx].1),
        ("panel_optimized_sparse", &panel_d),
    ] {
        let p = dir.join(format!("{stem}.csv"));
        Histogram::from_samples(&panel.finals, lo, hi, bins).write_csv(&p)?;
        artifacts.push(rel(&dir, &p));
    }

    let n = cfg.eval.n_samples;
    let runs = vec![
        panel_summary("constant_cfg", &g_const, &panel_a, n),
        panel_summary("conditional_only", &g_cond, &panel_b, n),
        panel_summary("random_sparse_median", &random_runs[median_idx].0, &random_runs[median_idx].1, n),
        panel_summary("optimized_sparse", &outcome.schedule, &panel_d, n),
    ];
    let report = assemble_report(
        &cfg.name,
        "repro-fig2",
        cfg.echo_json(),
        runs,
        artifacts,
        json!({
            "w1": {
                "constant_cfg": panel_a.w1,
                "conditional_only": panel_b.w1,
                "random_sparse_all": random_w1s,
                "random_sparse_median": random_median,
                "optimized_sparse": panel_d.w1,
            },
            "passes": {
                "constant_cfg": panel_a.ledger.total_forward_passes() / n as u64,
                "conditional_only": panel_b.ledger.total_forward_passes() / n as u64,
                "random_sparse": random_runs[median_idx].1.ledger.total_forward_passes() / n as u64,
                "optimized_sparse": panel_d.ledger.total_forward_passes() / n as u64,
            },
            "optimized_active_steps": outcome.schedule.active_steps(),
            "search_fitness": outcome.fitness,
        }),
    );
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// `bench`: pass/MAC accounting across pipeline variants. For the block
/// model this compares constant-CFG full compute against the sparse
/// schedule with and without calibrated caching.
pub fn run_bench(
    cfg: &ExperimentConfig,
    schedule_path: Option<&Path>,
    bank_path: Option<&Path>,
    ranks_path: Option<&Path>,
) -> Result<ExperimentReport> {
    let dir = prepare_out_dir(cfg)?;
    match cfg.model.kind {
        ModelKind::Blocknet => bench_blocknet(cfg, &dir, schedule_path, bank_path, ranks_path),
        ModelKind::Mixture => bench_mixture(cfg, &dir, schedule_path),
    }
}

fn bench_mixture(
    cfg: &ExperimentConfig,
    dir: &Path,
    schedule_path: Option<&Path>,
) -> Result<ExperimentReport> {
    let model = cfg.mixture_model()?;
    let grid = cfg.sample_grid()?;
    let target =
        if model.marginal().dim() == 1 { Some(guided_target(cfg, &model)?) } else { None };
    let g_const = GuidanceSchedule::constant(
        grid.len(),
        cfg.guidance.w_const,
        cfg.guidance.tau,
        cfg.guidance.w_max,
    )?;
    let (g_sparse, sparse_grid) = match schedule_path {
        Some(p) => load_schedule(p, cfg.noise.t_max)?,
        None => (g_const.clone(), grid.clone()),
    };
    let n = cfg.eval.n_samples;
    let priors = draw_prior(n, model.marginal().dim(), derive_seed(cfg.seed, 1));
    let x0s: Vec<(Vec<f64>, usize)> =
        priors.into_iter().map(|x| (x, cfg.eval.eval_class)).collect();
    let mut runs = Vec::new();
    for (label, g, gr) in
        [("constant_cfg", &g_const, &grid), ("schedule", &g_sparse, &sparse_grid)]
    {
        let opts = SampleOptions { record_states: false, ..Default::default() };
        let (finals, ledger) = sample_batch(|| model.clone(), &x0s, gr, g, model.schedule(), &opts)?;
        let xs: Vec<f64> = finals.iter().map(|v| v[0]).collect();
        let w1 = target.as_ref().map(|t| wasserstein_to_density(&xs, t));
        let (_, cfg_steps) = count_passes(g);
        runs.push(RunSummary {
            label: label.into(),
            steps: gr.len(),
            cfg_steps: Some(cfg_steps),
            total_forward_passes: Some(ledger.total_forward_passes()),
            dist: Some(DistReport {
                wasserstein1: w1,
                energy_distance: None,
                mse_to_reference: None,
                sample_count: n,
            }),
            ledger: Some(ledger.export()),
        });
    }
    let report = assemble_report(
        &cfg.name,
        "bench",
        cfg.echo_json(),
        runs,
        vec![],
        serde_json::Value::Null,
    );
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn bench_blocknet(
    cfg: &ExperimentConfig,
    dir: &Path,
    schedule_path: Option<&Path>,
    bank_path: Option<&Path>,
    ranks_path: Option<&Path>,
) -> Result<ExperimentReport> {
    let net = cfg.blocknet()?;
    let sched = cfg.noise_schedule()?;
    let grid = cfg.sample_grid()?;
    let g_const = GuidanceSchedule::constant(
        grid.len(),
        cfg.guidance.w_const,
        cfg.guidance.tau,
        cfg.guidance.w_max,
    )?;
    let (g_sparse, sparse_grid) = match schedule_path {
        Some(p) => load_schedule(p, cfg.noise.t_max)?,
        None => (g_const.clone(), grid.clone()),
    };
    let n = cfg.eval.n_samples.min(512);
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 6));
    let x0s: Vec<(Vec<f64>, usize)> = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..net.config().data_dim)
                .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
                .collect();
            (x, rng.random_range(0..net.config().n_classes))
        })
        .collect();
    let opts = SampleOptions { record_states: false, ..Default::default() };

    let mut runs = Vec::new();
    let (base_finals, base_ledger) =
        sample_batch(|| BlockNetPredictor(&net), &x0s, &grid, &g_const, &sched, &opts)?;
    let base_macs = base_ledger.mac_estimate;
    let (_, c0) = count_passes(&g_const);
    runs.push(RunSummary {
        label: "constant_cfg_full".into(),
        steps: grid.len(),
        cfg_steps: Some(c0),
        total_forward_passes: Some(base_ledger.total_forward_passes()),
        dist: None,
        ledger: Some(base_ledger.export()),
    });

    let (sparse_finals, sparse_ledger) =
        sample_batch(|| BlockNetPredictor(&net), &x0s, &sparse_grid, &g_sparse, &sched, &opts)?;
    let mse_sparse = mse(&sparse_finals, &base_finals);
    let (_, c1) = count_passes(&g_sparse);
    runs.push(RunSummary {
        label: "schedule_full".into(),
        steps: sparse_grid.len(),
        cfg_steps: Some(c1),
        total_forward_passes: Some(sparse_ledger.total_forward_passes()),
        dist: Some(DistReport {
            wasserstein1: None,
            energy_distance: None,
            mse_to_reference: Some(mse_sparse),
            sample_count: n,
        }),
        ledger: Some(sparse_ledger.export()),
    });

    let mut fraction_cached = None;
    if let (Some(bp), Some(rp)) = (bank_path, ranks_path) {
        let bank_json: BankJson = serde_json::from_str(&std::fs::read_to_string(bp)?)?;
        let rank_file: RankConfigFile = serde_json::from_str(&std::fs::read_to_string(rp)?)?;
        let ranks = rank_file.config()?;
        let policy = cfg.cache_policy();
        let bank0 = CalibrationBank::from_json(&bank_json)?;
        let run_one = |x0: &Vec<f64>, class: usize| -> Result<(Vec<f64>, PassLedger)> {
            let mut bank = bank0.clone();
            let mut cached = CachedBlockNet::new(&net, &mut bank, ranks.clone(), policy)?;
            let tr = sample(&mut cached, x0, class, &sparse_grid, &g_sparse, &sched, &opts)?;
            Ok((tr.final_x, tr.ledger))
        };
        let mut cached_finals = Vec::with_capacity(n);
        let mut cached_ledger = PassLedger::new();
        for (x0, class) in &x0s {
            let (f, l) = run_one(x0, *class)?;
            cached_finals.push(f);
            cached_ledger.merge(&l);
        }
        let mse_cached = mse(&cached_finals, &base_finals);
        fraction_cached = Some(cached_ledger.mac_estimate / base_macs);
        runs.push(RunSummary {
            label: "schedule_cached".into(),
            steps: sparse_grid.len(),
            cfg_steps: Some(c1),
            total_forward_passes: Some(cached_ledger.total_forward_passes()),
            dist: Some(DistReport {
                wasserstein1: None,
                energy_distance: None,
                mse_to_reference: Some(mse_cached),
                sample_count: n,
            }),
            ledger: Some(cached_ledger.export()),
        });
    }

    let report = assemble_report(
        &cfg.name,
        "bench",
        cfg.echo_json(),
        runs,
        vec![],
        json!({
            "mac_fraction_schedule_full": sparse_ledger.mac_estimate / base_macs,
            "mac_fraction_schedule_cached": fraction_cached,
        }),
    );
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum::<f64>())
        .sum();
    total / a.len() as f64
}

fn rel(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}
