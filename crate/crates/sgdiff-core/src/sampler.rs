//! DDIM reverse steps, classifier-free guidance, and the sampling loop.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::guidance::GuidanceSchedule;
use crate::ledger::PassLedger;
use crate::model::{Cond, NoisePredictor};
use crate::schedule::{NoiseSchedule, TimestepGrid};

/// eps_u + w * (eps_c - eps_u), elementwise.
pub fn apply_cfg(eps_u: &[f64], eps_c: &[f64], w: f64) -> Vec<f64> {
    assert_eq!(eps_u.len(), eps_c.len(), "CFG branch dimensions differ");
    eps_u
        .iter()
        .zip(eps_c)
        .map(|(&u, &c)| u + w * (c - u))
        .collect()
}

/// One deterministic-or-stochastic DDIM update from `t` to `t_prev`.
///
/// x_prev = sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev - sigma^2) * eps + sigma * noise
/// with x0_hat = (x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t).
pub fn ddim_step(
    x_t: &[f64],
    eps: &[f64],
    t: u32,
    t_prev: u32,
    sched: &NoiseSchedule,
    sigma_t: f64,
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    assert!(t > t_prev, "ddim_step requires t > t_prev");
    assert_eq!(x_t.len(), eps.len());
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let dir_sq = 1.0 - ab_prev - sigma_t * sigma_t;
    if dir_sq < 0.0 {
        return Err(Error::InvalidSigma { timestep: t });
    }
    let c0 = ab_prev.sqrt() / ab_t.sqrt();
    let c_eps = dir_sq.sqrt() - ab_prev.sqrt() * (1.0 - ab_t).sqrt() / ab_t.sqrt();
    let mut out: Vec<f64> = x_t
        .iter()
        .zip(eps)
        .map(|(&x, &e)| c0 * x + c_eps * e)
        .collect();
    if sigma_t > 0.0 {
        let n = noise.expect("noise vector required when sigma_t > 0");
        assert_eq!(n.len(), out.len());
        for (o, &z) in out.iter_mut().zip(n) {
            *o += sigma_t * z;
        }
    }
    Ok(out)
}

/// Thresholded guidance: full CFG when `w_t >= tau`, conditional-only
/// otherwise. Records one conditional pass, plus one unconditional pass when
/// active.
pub fn guided_prediction<M: NoisePredictor + ?Sized>(
    model: &mut M,
    x: &[f64],
    t: u32,
    class: usize,
    w_t: f64,
    tau: f64,
    ledger: &mut PassLedger,
) -> Result<Vec<f64>> {
    let eps_c = model.predict(x, t, Cond::Class(class), ledger)?;
    ledger.record_cond_pass();
    if w_t >= tau {
        let eps_u = model.predict(x, t, Cond::Null, ledger)?;
        ledger.record_uncond_pass();
        Ok(apply_cfg(&eps_u, &eps_c, w_t))
    } else {
        Ok(eps_c)
    }
}

/// Sampling options shared across trajectories of a run.
#[derive(Debug, Clone)]
pub struct SampleOptions {
    /// Per-step stochasticity; 0 gives deterministic DDIM.
    pub sigma: f64,
    /// Seed for the sigma>0 noise stream.
    pub seed: u64,
    /// Keep every intermediate state in the trajectory.
    pub record_states: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { sigma: 0.0, seed: 0, record_states: true }
    }
}

/// A full reverse trajectory with its ledger.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// (timestep, state) pairs from (t_T, x_T) down to (0, x_0). Only the
    /// endpoints are kept when `record_states` is off.
    pub states: Vec<(u32, Vec<f64>)>,
    pub final_x: Vec<f64>,
    pub ledger: PassLedger,
    /// One ledger per grid step, in order; their merge equals `ledger`.
    pub per_step: Vec<PassLedger>,
}

impl Trajectory {
    /// CSV with columns step_index,timestep,component_0..component_{D-1}.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let d = self.final_x.len();
        let mut header = String::from("step_index,timestep");
        for j in 0..d {
            header.push_str(&format!(",component_{j}"));
        }
        writeln!(f, "{header}")?;
        for (i, (t, x)) in self.states.iter().enumerate() {
            let comps: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{i},{t},{}", comps.join(","))?;
        }
        Ok(())
    }
}

fn check_finite(x: &[f64], t: u32) -> Result<()> {
    for &v in x {
        if !v.is_finite() {
            return Err(Error::NumericalDivergence {
                timestep: t,
                detail: format!("state component became {v}"),
            });
        }
    }
    Ok(())
}

/// Run the guided sampler from `x_t` down the grid.
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &mut M,
    x_t: &[f64],
    class: usize,
    grid: &TimestepGrid,
    gsched: &GuidanceSchedule,
    sched: &NoiseSchedule,
    opts: &SampleOptions,
) -> Result<Trajectory> {
    if gsched.len() != grid.len() {
        return Err(Error::Config(format!(
            "guidance schedule length {} != grid length {}",
            gsched.len(),
            grid.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut x = x_t.to_vec();
    check_finite(&x, grid.step(0))?;
    let mut states = Vec::new();
    if opts.record_states {
        states.push((grid.step(0), x.clone()));
    }
    let mut per_step = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let t = grid.step(i);
        let t_prev = grid.prev(i);
        let mut step_ledger = PassLedger::new();
        model.begin_step(i, t);
        let eps = guided_prediction(model, &x, t, class, gsched.w[i], gsched.tau, &mut step_ledger)?;
        model.end_step();
        let noise: Option<Vec<f64>> = if opts.sigma > 0.0 {
            Some((0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect())
        } else {
            None
        };
        x = ddim_step(&x, &eps, t, t_prev, sched, opts.sigma, noise.as_deref())?;
        check_finite(&x, t)?;
        if opts.record_states {
            states.push((t_prev, x.clone()));
        }
        per_step.push(step_ledger);
    }
    if !opts.record_states {
        states.push((grid.step(0), x_t.to_vec()));
        states.push((0, x.clone()));
    }
    let ledger = PassLedger::merged(per_step.iter());
    Ok(Trajectory { states, final_x: x, ledger, per_step })
}

/// Sample many trajectories concurrently; results are ordered by input index
/// and the merged ledger is reduced in that order.
pub fn sample_batch<M, F>(
    make_model: F,
    inputs: &[(Vec<f64>, usize)],
    grid: &TimestepGrid,
    gsched: &GuidanceSchedule,
    sched: &NoiseSchedule,
    opts: &SampleOptions,
) -> Result<(Vec<Vec<f64>>, PassLedger)>
where
    M: NoisePredictor,
    F: Fn() -> M + Sync,
{
    let runs: Vec<Result<(Vec<f64>, PassLedger)>> = inputs
        .par_iter()
        .map(|(x0, class)| {
            let mut model = make_model();
            let o = SampleOptions { record_states: false, ..opts.clone() };
            let traj = sample(&mut model, x0, *class, grid, gsched, sched, &o)?;
            Ok((traj.final_x, traj.ledger))
        })
        .collect();
    let mut finals = Vec::with_capacity(inputs.len());
    let mut total = PassLedger::new();
    for r in runs {
        let (x, l) = r?;
        finals.push(x);
        total.merge(&l);
    }
    Ok((finals, total))
}

/// Draw `n` standard-normal prior points of dimension `dim`.
pub fn draw_prior(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}
