//! Single-file experiment configuration: TOML with per-stage sections,
//! defaults for every field, unknown keys rejected, dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocknet::{BlockNet, BlockNetConfig};
use crate::cache::CachePolicy;
use crate::error::{Error, Result};
use crate::evo::EvoConfig;
use crate::mixture::{GaussianMixture, MixtureComponent, MixtureModel};
use crate::schedule::{NoiseSchedule, ScheduleKind, TimestepGrid};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
    pub model: ModelSection,
    pub noise: NoiseSection,
    pub grid: GridSection,
    pub guidance: GuidanceSection,
    pub evo: EvoSection,
    pub cache: CacheSection,
    pub ranks: RankSection,
    pub eval: EvalSection,
    pub fig2: Fig2Section,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 7,
            out_dir: PathBuf::from("out"),
            workers: 0,
            model: ModelSection::default(),
            noise: NoiseSection::default(),
            grid: GridSection::default(),
            guidance: GuidanceSection::default(),
            evo: EvoSection::default(),
            cache: CacheSection::default(),
            ranks: RankSection::default(),
            eval: EvalSection::default(),
            fig2: Fig2Section::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mixture,
    Blocknet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub mixture: MixtureSection,
    pub blocknet: BlockNetSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mixture,
            mixture: MixtureSection::default(),
            blocknet: BlockNetSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: f64,
}

/// Classes are sub-mixtures; the unconditional model is their prior-weighted
/// union.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSection {
    pub classes: Vec<Vec<ComponentSpec>>,
    pub priors: Vec<f64>,
}

impl Default for MixtureSection {
    fn default() -> Self {
        // two shared components at +-0.6 with class-dependent weights; the
        // marginal works out to (0.35, 0.65)
        let comp = |w: f64, m: f64| ComponentSpec { weight: w, mean: vec![m], var: 0.49 };
        Self {
            classes: vec![
                vec![comp(0.75, -0.6), comp(0.25, 0.6)],
                vec![comp(5.0 / 28.0, -0.6), comp(23.0 / 28.0, 0.6)],
            ],
            priors: vec![0.3, 0.7],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockNetSection {
    pub blocks: usize,
    pub width: usize,
    pub hidden: usize,
    pub data_dim: usize,
    pub n_classes: usize,
    pub t_scale: f64,
    pub spectral_bound: f64,
    pub seed: u64,
}

impl Default for BlockNetSection {
    fn default() -> Self {
        let d = BlockNetConfig::default();
        Self {
            blocks: d.blocks,
            width: d.width,
            hidden: d.hidden,
            data_dim: d.data_dim,
            n_classes: d.n_classes,
            t_scale: d.t_scale,
            spectral_bound: d.spectral_bound,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: ScheduleKind,
    pub t_max: u32,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { kind: ScheduleKind::LinearBeta, t_max: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Sampling step count T.
    pub steps: usize,
    /// Reference trajectory length for the schedule search.
    pub t_ref: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { steps: 50, t_ref: 1000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub w_const: f64,
    pub tau: f64,
    pub w_max: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self { w_const: 1.5, tau: 0.15, w_max: 3.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvoSection {
    pub population: usize,
    pub generations: usize,
    pub sigma0: f64,
    pub eta: f64,
    /// Fixed sparsity weight; unset derives it from the median generation-0
    /// quality loss.
    pub sparsity_weight: Option<f64>,
    pub sparsity_weight_scale: f64,
    pub n_probes: usize,
    /// Cap on active steps enforced during the search (unset: none).
    pub target_active: Option<usize>,
    pub return_best_of_both: bool,
}

impl Default for EvoSection {
    fn default() -> Self {
        Self {
            population: 16,
            generations: 10,
            sigma0: 0.5,
            eta: 1.0,
            sparsity_weight: None,
            sparsity_weight_scale: 1.0,
            n_probes: 16,
            target_active: None,
            return_best_of_both: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub refresh_period: usize,
    pub ridge: f64,
    pub guidance_rule: bool,
    pub calibrate: bool,
    /// Number of calibration probe runs.
    pub calib_runs: usize,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self { refresh_period: 2, ridge: 1e-6, guidance_rule: true, calibrate: true, calib_runs: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSection {
    pub regions: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub budget: usize,
    pub max_sweeps: usize,
    pub eval_probes: usize,
}

impl Default for RankSection {
    fn default() -> Self {
        Self { regions: 4, r_min: 2, r_max: 8, budget: 24, max_sweeps: 3, eval_probes: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Final-sample count for distribution metrics.
    pub n_samples: usize,
    pub hist_bins: usize,
    pub density_lo: f64,
    pub density_hi: f64,
    pub density_points: usize,
    /// Class used for distribution evaluations.
    pub eval_class: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            hist_bins: 80,
            density_lo: -10.0,
            density_hi: 10.0,
            density_points: 4001,
            eval_class: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Section {
    /// Active-step count for the optimized and random sparse panels.
    pub active_steps: usize,
    /// Number of random sparse schedules (median reported).
    pub random_schedules: usize,
}

impl Default for Fig2Section {
    fn default() -> Self {
        Self { active_steps: 8, random_schedules: 10 }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table =
            text.parse().map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        table.try_into().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Effective-config JSON echo for provenance.
    pub fn echo_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(
            self.noise.kind,
            self.noise.t_max,
            (self.noise.beta_start, self.noise.beta_end),
        )
    }

    pub fn sample_grid(&self) -> Result<TimestepGrid> {
        TimestepGrid::uniform(self.grid.steps, self.noise.t_max)
    }

    pub fn ref_grid(&self) -> Result<TimestepGrid> {
        TimestepGrid::uniform(self.grid.t_ref, self.noise.t_max)
    }

    pub fn mixture_model(&self) -> Result<MixtureModel> {
        let classes = self
            .model
            .mixture
            .classes
            .iter()
            .map(|comps| {
                GaussianMixture::new(
                    comps
                        .iter()
                        .map(|c| MixtureComponent {
                            weight: c.weight,
                            mean: c.mean.clone(),
                            var: c.var,
                        })
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureModel::new(classes, self.model.mixture.priors.clone(), self.noise_schedule()?)
    }

    pub fn blocknet(&self) -> Result<BlockNet> {
        let b = &self.model.blocknet;
        BlockNet::new(BlockNetConfig {
            blocks: b.blocks,
            width: b.width,
            hidden: b.hidden,
            data_dim: b.data_dim,
            n_classes: b.n_classes,
            t_scale: b.t_scale,
            spectral_bound: b.spectral_bound,
            seed: b.seed,
        })
    }

    pub fn n_classes(&self) -> usize {
        match self.model.kind {
            ModelKind::Mixture => self.model.mixture.classes.len(),
            ModelKind::Blocknet => self.model.blocknet.n_classes,
        }
    }

    pub fn data_dim(&self) -> usize {
        match self.model.kind {
            ModelKind::Mixture => self
                .model
                .mixture
                .classes
                .first()
                .and_then(|c| c.first())
                .map(|c| c.mean.len())
                .unwrap_or(1),
            ModelKind::Blocknet => self.model.blocknet.data_dim,
        }
    }

    pub fn evo_config(&self) -> EvoConfig {
        EvoConfig {
            population: self.evo.population,
            generations: self.evo.generations,
            sigma0: self.evo.sigma0,
            eta: self.evo.eta,
            sparsity_weight: self.evo.sparsity_weight,
            sparsity_weight_scale: self.evo.sparsity_weight_scale,
            tau: self.guidance.tau,
            w_max: self.guidance.w_max,
            w_const: self.guidance.w_const,
            t_ref: self.grid.t_ref,
            n_probes: self.evo.n_probes,
            target_active: self.evo.target_active,
            return_best_of_both: self.evo.return_best_of_both,
            seed: self.seed,
        }
    }

    pub fn cache_policy(&self) -> CachePolicy {
        CachePolicy {
            refresh_period: self.cache.refresh_period,
            guidance_rule: self.cache.guidance_rule,
            calibrate: self.cache.calibrate,
        }
    }
}

/// Apply `key.path=value` overrides onto a raw TOML table before
/// deserialization. Values parse as TOML literals, falling back to strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[(String, String)]) -> Result<()> {
    for (key, raw) in overrides {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad override key '{key}'")));
        }
        let value = parse_toml_value(raw);
        let mut cur = &mut *table;
        for part in &parts[..parts.len() - 1] {
            let entry = cur
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry.as_table_mut().ok_or_else(|| {
                Error::Config(format!("override '{key}' crosses a non-table value at '{part}'"))
            })?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(tbl) = wrapped.parse::<toml::Table>() {
        if let Some(v) = tbl.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.grid.steps, cfg.grid.steps);
        assert_eq!(back.model.mixture.priors, cfg.model.mixture.priors);
    }

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.grid.steps, 50);
        assert_eq!(cfg.eval.n_samples, 10_000);
        cfg.mixture_model().unwrap();
    }

    #[test]
    fn unknown_keys_are_errors_and_named() {
        let err = ExperimentConfig::from_toml_str("grid = { steps = 10, stepz = 3 }").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stepz"), "error should name the key: {msg}");
        let err = ExperimentConfig::from_toml_str("bogus_section = 1").unwrap_err();
        assert!(err.to_string().contains("bogus_section"));
    }

    #[test]
    fn overrides_apply_with_types() {
        let mut table: toml::Table = "".parse().unwrap();
        apply_overrides(
            &mut table,
            &[
                ("grid.steps".into(), "25".into()),
                ("guidance.w_const".into(), "2.0".into()),
                ("name".into(), "\"trial\"".into()),
                ("cache.guidance_rule".into(), "false".into()),
            ],
        )
        .unwrap();
        let cfg = ExperimentConfig::from_table(table).unwrap();
        assert_eq!(cfg.grid.steps, 25);
        assert_eq!(cfg.guidance.w_const, 2.0);
        assert_eq!(cfg.name, "trial");
        assert!(!cfg.cache.guidance_rule);
    }

    #[test]
    fn bare_string_override_falls_back() {
        let mut table: toml::Table = "".parse().unwrap();
        apply_overrides(&mut table, &[("name".into(), "plain".into())]).unwrap();
        let cfg = ExperimentConfig::from_table(table).unwrap();
        assert_eq!(cfg.name, "plain");
    }

    #[test]
    fn default_mixture_marginal_is_two_component() {
        let cfg = ExperimentConfig::default();
        let model = cfg.mixture_model().unwrap();
        // shared components merge to weights 0.35 / 0.65
        let total: f64 = model.marginal().components().iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let at_minus: f64 = model
            .marginal()
            .components()
            .iter()
            .filter(|c| c.mean[0] < 0.0)
            .map(|c| c.weight)
            .sum();
        assert!((at_minus - 0.35).abs() < 1e-12);
    }
}
