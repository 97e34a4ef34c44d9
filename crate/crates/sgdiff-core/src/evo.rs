//! Evolutionary discovery of sparse guidance schedules: a population center
//! in logit space is decoded through a scaled sigmoid, perturbed with
//! annealed Gaussian noise, scored by output-matching quality plus a
//! sparsity reward, and moved by rank-weighted recombination.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceSchedule;
use crate::model::NoisePredictor;
use crate::sampler::{sample, SampleOptions};
use crate::schedule::{NoiseSchedule, TimestepGrid};

const LOGIT_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvoConfig {
    /// Population size P.
    pub population: usize,
    /// Generation count G.
    pub generations: usize,
    /// Initial perturbation scale; annealed linearly to sigma0/G.
    pub sigma0: f64,
    /// Center learning rate.
    pub eta: f64,
    /// Sparsity weight; None derives it from the median generation-0
    /// quality loss times `sparsity_weight_scale`.
    pub sparsity_weight: Option<f64>,
    pub sparsity_weight_scale: f64,
    /// Activation threshold.
    pub tau: f64,
    pub w_max: f64,
    /// Reference guidance scale (also the center initialization).
    pub w_const: f64,
    /// Reference trajectory length.
    pub t_ref: usize,
    pub n_probes: usize,
    /// Project every candidate (and the final schedule) to at most this many
    /// active steps.
    pub target_active: Option<usize>,
    /// Return the better of decode(center) and the best candidate seen.
    pub return_best_of_both: bool,
    pub seed: u64,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            population: 16,
            generations: 10,
            sigma0: 0.5,
            eta: 1.0,
            sparsity_weight: None,
            sparsity_weight_scale: 1.0,
            tau: 0.15,
            w_max: 3.0,
            w_const: 1.5,
            t_ref: 1000,
            n_probes: 16,
            target_active: None,
            return_best_of_both: true,
            seed: 0,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config("population must be >= 2".into()));
        }
        if self.generations < 1 {
            return Err(Error::Config("need at least one generation".into()));
        }
        if !(self.sigma0 > 0.0) || !(self.eta > 0.0) {
            return Err(Error::Config("sigma0 and eta must be > 0".into()));
        }
        if self.t_ref < t {
            return Err(Error::Config(format!(
                "t_ref {} below sampling step count {t}",
                self.t_ref
            )));
        }
        if self.n_probes == 0 {
            return Err(Error::Config("need at least one probe".into()));
        }
        Ok(())
    }
}

/// Search state carried across generations.
#[derive(Debug, Clone)]
pub struct EvoState {
    /// Population center in logit space, one entry per sampling step.
    pub mu: Vec<f64>,
    pub generation: usize,
    pub best_w: Option<Vec<f64>>,
    pub best_fitness: f64,
    pub best_quality_loss: f64,
}

impl EvoState {
    pub fn init(t: usize, cfg: &EvoConfig) -> Self {
        let p = (cfg.w_const / cfg.w_max).clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
        Self {
            mu: vec![logit(p); t],
            generation: 0,
            best_w: None,
            best_fitness: f64::NEG_INFINITY,
            best_quality_loss: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub w: Vec<f64>,
    pub delta: Vec<f64>,
    pub fitness: f64,
    pub quality_loss: f64,
    pub sparsity: f64,
}

/// Per-generation search log record (one JSON line each).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenRecord {
    pub g: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub mse_best: f64,
    pub sigma_noise: f64,
    pub active_steps_best: usize,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// w = w_max * sigmoid(mu), elementwise.
pub fn decode_center(mu: &[f64], w_max: f64) -> Vec<f64> {
    mu.iter().map(|&z| w_max * sigmoid(z)).collect()
}

/// Zero all but the `cap` largest entries (ties keep the earlier step).
pub fn project_active_cap(w: &mut [f64], tau: f64, cap: usize) {
    let mut active: Vec<usize> = (0..w.len()).filter(|&i| w[i] >= tau).collect();
    if active.len() <= cap {
        return;
    }
    active.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap().then(a.cmp(&b)));
    for &i in &active[cap..] {
        w[i] = 0.0;
    }
}

/// Draw the generation-`state.generation` population: clamped perturbations
/// of the decoded center with annealed noise.
pub fn spawn_population(state: &EvoState, cfg: &EvoConfig, t: usize, rng: &mut ChaCha12Rng) -> Vec<Candidate> {
    assert!(state.generation < cfg.generations, "spawn past the final generation");
    let sigma = cfg.sigma0 * (1.0 - state.generation as f64 / cfg.generations as f64);
    let base = decode_center(&state.mu, cfg.w_max);
    (0..cfg.population)
        .map(|_| {
            let delta: Vec<f64> = (0..t)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    sigma * z
                })
                .collect();
            let mut w: Vec<f64> = base
                .iter()
                .zip(&delta)
                .map(|(&b, &d)| (b + d).clamp(0.0, cfg.w_max))
                .collect();
            if let Some(cap) = cfg.target_active {
                project_active_cap(&mut w, cfg.tau, cap);
            }
            Candidate { w, delta, fitness: f64::NAN, quality_loss: f64::NAN, sparsity: f64::NAN }
        })
        .collect()
}

/// Fixed probe set for a whole search: prior draws plus class labels.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub noises: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
}

impl ProbeSet {
    pub fn draw(n: usize, dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let noises = (0..n)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let classes = (0..n)
            .map(|_| {
                let u: f64 = rand::Rng::random(&mut rng);
                ((u * n_classes as f64) as usize).min(n_classes - 1)
            })
            .collect();
        Self { noises, classes }
    }

    pub fn len(&self) -> usize {
        self.noises.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noises.is_empty()
    }
}

/// Reference outputs: constant-guidance runs on the reference grid, one per
/// probe.
pub fn reference_outputs<M, F>(
    make_model: F,
    probes: &ProbeSet,
    cfg: &EvoConfig,
    sched: &NoiseSchedule,
    ref_grid: &TimestepGrid,
) -> Result<Vec<Vec<f64>>>
where
    M: NoisePredictor,
    F: Fn() -> M + Sync,
{
    let gconst = GuidanceSchedule::constant(ref_grid.len(), cfg.w_const, cfg.tau, cfg.w_max)?;
    let opts = SampleOptions { record_states: false, ..Default::default() };
    probes
        .noises
        .par_iter()
        .zip(&probes.classes)
        .map(|(x0, &class)| {
            let mut model = make_model();
            Ok(sample(&mut model, x0, class, ref_grid, &gconst, sched, &opts)?.final_x)
        })
        .collect()
}

/// Mean squared final-output distance to the reference outputs.
#[allow(clippy::too_many_arguments)]
pub fn quality_loss<M, F>(
    make_model: F,
    w: &[f64],
    tau: f64,
    w_max: f64,
    probes: &ProbeSet,
    refs: &[Vec<f64>],
    sched: &NoiseSchedule,
    grid: &TimestepGrid,
) -> Result<f64>
where
    M: NoisePredictor,
    F: Fn() -> M + Sync,
{
    if refs.len() != probes.len() {
        return Err(Error::Config(format!(
            "{} probes but {} reference outputs",
            probes.len(),
            refs.len()
        )));
    }
    let gsched = GuidanceSchedule::new(w.to_vec(), tau, w_max)?;
    let opts = SampleOptions { record_states: false, ..Default::default() };
    let per_probe: Vec<Result<f64>> = probes
        .noises
        .par_iter()
        .zip(&probes.classes)
        .zip(refs)
        .map(|((x0, &class), r)| {
            let mut model = make_model();
            let out = sample(&mut model, x0, class, grid, &gsched, sched, &opts)?.final_x;
            Ok(out.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        })
        .collect();
    let mut total = 0.0;
    for p in per_probe {
        total += p?;
    }
    Ok(total / probes.len() as f64)
}

/// Sparsity S = (T - #{w_t >= tau}) / T.
pub fn sparsity(w: &[f64], tau: f64) -> f64 {
    let active = w.iter().filter(|&&v| v >= tau).count();
    (w.len() - active) as f64 / w.len() as f64
}

/// f = -quality_loss + lambda * sparsity.
pub fn fitness(quality_loss: f64, sparsity: f64, lambda: f64) -> f64 {
    -quality_loss + lambda * sparsity
}

/// Rank-based recombination weights: a_i = rank_i/(P-1) - 0.5 with rank 0
/// for the lowest fitness; ties broken by candidate index.
pub fn rank_weights(fitnesses: &[f64]) -> Vec<f64> {
    let p = fitnesses.len();
    assert!(p >= 2, "rank weights need at least two candidates");
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| fitnesses[a].total_cmp(&fitnesses[b]).then(a.cmp(&b)));
    let mut weights = vec![0.0; p];
    for (rank, &idx) in order.iter().enumerate() {
        weights[idx] = rank as f64 / (p - 1) as f64 - 0.5;
    }
    weights
}

/// Natural-gradient style center move toward highly ranked candidates:
/// mu += eta/P * sum_i a_i (logit(w_i / w_max) - mu).
pub fn update_center(
    state: &mut EvoState,
    candidates: &[Candidate],
    weights: &[f64],
    eta: f64,
    w_max: f64,
) {
    let p = candidates.len() as f64;
    let t = state.mu.len();
    for j in 0..t {
        let mut acc = 0.0;
        for (cand, &a) in candidates.iter().zip(weights) {
            let frac = (cand.w[j] / w_max).clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
            acc += a * (logit(frac) - state.mu[j]);
        }
        state.mu[j] += eta / p * acc;
    }
    state.generation += 1;
    for cand in candidates {
        if cand.fitness > state.best_fitness {
            state.best_fitness = cand.fitness;
            state.best_w = Some(cand.w.clone());
            state.best_quality_loss = cand.quality_loss;
        }
    }
}

/// Outcome of a schedule search.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub schedule: GuidanceSchedule,
    pub fitness: f64,
    pub quality_loss: f64,
    pub lambda: f64,
    pub log: Vec<GenRecord>,
    pub state: EvoState,
}

/// Full Stage-1 search. Reference outputs are computed once; candidate
/// evaluations within a generation run concurrently with a deterministic
/// index-ordered reduction; divergent candidates score -inf instead of
/// aborting the search.
pub fn optimize_schedule<M, F>(
    cfg: &EvoConfig,
    make_model: F,
    sched: &NoiseSchedule,
    grid: &TimestepGrid,
    ref_grid: &TimestepGrid,
    probes: &ProbeSet,
) -> Result<SearchOutcome>
where
    M: NoisePredictor,
    F: Fn() -> M + Sync,
{
    let t = grid.len();
    cfg.validate(t)?;
    if ref_grid.len() != cfg.t_ref {
        return Err(Error::Config("reference grid length != t_ref".into()));
    }
    let refs = reference_outputs(&make_model, probes, cfg, sched, ref_grid)?;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut state = EvoState::init(t, cfg);
    let mut lambda = cfg.sparsity_weight;
    let mut log = Vec::with_capacity(cfg.generations);

    for g in 0..cfg.generations {
        let sigma = cfg.sigma0 * (1.0 - g as f64 / cfg.generations as f64);
        let mut cands = spawn_population(&state, cfg, t, &mut rng);
        let losses: Vec<Option<f64>> = cands
            .par_iter()
            .map(|c| {
                match quality_loss(
                    &make_model,
                    &c.w,
                    cfg.tau,
                    cfg.w_max,
                    probes,
                    &refs,
                    sched,
                    grid,
                ) {
                    Ok(l) => Some(Some(l)),
                    Err(Error::NumericalDivergence { .. }) => Some(None),
                    Err(_) => None,
                }
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Config("candidate evaluation failed".into()))?;
        let lam = *lambda.get_or_insert_with(|| {
            let mut finite: Vec<f64> = losses.iter().flatten().copied().collect();
            finite.sort_by(f64::total_cmp);
            let med = if finite.is_empty() { 0.0 } else { finite[finite.len() / 2] };
            (med * cfg.sparsity_weight_scale).max(1e-9)
        });
        for (cand, loss) in cands.iter_mut().zip(&losses) {
            cand.sparsity = sparsity(&cand.w, cfg.tau);
            match loss {
                Some(l) => {
                    cand.quality_loss = *l;
                    cand.fitness = fitness(*l, cand.sparsity, lam);
                }
                None => {
                    cand.quality_loss = f64::INFINITY;
                    cand.fitness = f64::NEG_INFINITY;
                }
            }
        }
        let weights = rank_weights(&cands.iter().map(|c| c.fitness).collect::<Vec<_>>());
        update_center(&mut state, &cands, &weights, cfg.eta, cfg.w_max);
        let mean_fitness = cands.iter().map(|c| c.fitness).sum::<f64>() / cands.len() as f64;
        let best_active = state
            .best_w
            .as_ref()
            .map(|w| w.iter().filter(|&&v| v >= cfg.tau).count())
            .unwrap_or(0);
        log.push(GenRecord {
            g,
            best_fitness: state.best_fitness,
            mean_fitness,
            mse_best: state.best_quality_loss,
            sigma_noise: sigma,
            active_steps_best: best_active,
        });
    }
    let lam = lambda.unwrap_or(0.0);

    // finalize: decoded center, capped, thresholded; optionally replaced by
    // the best candidate seen
    let mut w_final = decode_center(&state.mu, cfg.w_max);
    if let Some(cap) = cfg.target_active {
        project_active_cap(&mut w_final, cfg.tau, cap);
    }
    for v in &mut w_final {
        if *v < cfg.tau {
            *v = 0.0;
        }
    }
    let final_loss = quality_loss(
        &make_model,
        &w_final,
        cfg.tau,
        cfg.w_max,
        probes,
        &refs,
        sched,
        grid,
    )?;
    let final_fitness = fitness(final_loss, sparsity(&w_final, cfg.tau), lam);

    let (w_out, f_out, l_out) = if cfg.return_best_of_both && state.best_fitness > final_fitness {
        let mut w = state.best_w.clone().expect("best_w tracks best_fitness");
        for v in &mut w {
            if *v < cfg.tau {
                *v = 0.0;
            }
        }
        (w, state.best_fitness, state.best_quality_loss)
    } else {
        (w_final, final_fitness, final_loss)
    };

    Ok(SearchOutcome {
        schedule: GuidanceSchedule::new(w_out, cfg.tau, cfg.w_max)?,
        fitness: f_out,
        quality_loss: l_out,
        lambda: lam,
        log,
        state,
    })
}
