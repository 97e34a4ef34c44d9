//! Feature caching with incremental calibration. On reuse steps every block
//! output is reconstructed as cached_out + A_r (h_in - cached_in); a branch
//! whose features were not produced at the previous step falls back to full
//! compute (the cached entries would describe a different trajectory point).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::blocknet::BlockNet;
use crate::calib::{CalibrationBank, TruncatedFactors};
use crate::error::{Error, Result};
use crate::ledger::PassLedger;
use crate::model::{Cond, NoisePredictor};
use crate::ranksearch::RankConfig;

/// Compute/reuse cadence and invalidation behavior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CachePolicy {
    /// Full compute every `refresh_period` steps; calibrated reuse otherwise.
    /// 1 disables reuse entirely.
    pub refresh_period: usize,
    /// Strict previous-step validity for each branch. Disabling this allows
    /// stale cache entries from older steps (the failure mode the deviation
    /// formulas predict).
    pub guidance_rule: bool,
    /// Apply the low-rank increment correction on reuse (raw cached outputs
    /// otherwise).
    pub calibrate: bool,
}

impl Default for CachePolicy {
    fn default() -> Self {
        Self { refresh_period: 2, guidance_rule: true, calibrate: true }
    }
}

impl CachePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.refresh_period == 0 {
            return Err(Error::Config("refresh_period must be >= 1".into()));
        }
        Ok(())
    }

    /// The first step is always a full compute.
    pub fn is_full_step(&self, step_index: usize) -> bool {
        self.refresh_period <= 1 || step_index.is_multiple_of(self.refresh_period)
    }

    pub fn is_reuse_step(&self, step_index: usize) -> bool {
        !self.is_full_step(step_index)
    }
}

type LayerFeatures = Vec<DVector<f64>>;

#[derive(Debug, Clone, Default)]
struct BranchCache {
    h_in: LayerFeatures,
    h_out: LayerFeatures,
    valid: bool,
}

/// Per-trajectory cache: one entry per branch, rolled at step boundaries.
#[derive(Debug, Clone, Default)]
pub struct CacheState {
    branches: [BranchCache; 2],
    pending: [Option<(LayerFeatures, LayerFeatures)>; 2],
    step_index: usize,
    pub last_full_step: Option<u32>,
}

impl CacheState {
    pub fn branch_valid(&self, uncond: bool) -> bool {
        self.branches[uncond as usize].valid
    }
}

/// BlockNet wrapped with calibrated caching. Exclusive to one sampling run.
pub struct CachedBlockNet<'a> {
    net: &'a BlockNet,
    policy: CachePolicy,
    ranks: RankConfig,
    /// Per-layer truncated factors at the configured region ranks.
    factors: Vec<TruncatedFactors>,
    state: CacheState,
}

impl<'a> CachedBlockNet<'a> {
    pub fn new(
        net: &'a BlockNet,
        bank: &mut CalibrationBank,
        ranks: RankConfig,
        policy: CachePolicy,
    ) -> Result<Self> {
        policy.validate()?;
        if bank.n_layers() != net.n_blocks() {
            return Err(Error::Config(format!(
                "bank has {} layers, net has {} blocks",
                bank.n_layers(),
                net.n_blocks()
            )));
        }
        ranks.validate()?;
        if ranks.n_blocks() != net.n_blocks() {
            return Err(Error::Config("rank config block count != net blocks".into()));
        }
        let factors = (0..net.n_blocks())
            .map(|l| bank.truncate_rank(l, ranks.rank_of_layer(l)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { net, policy, ranks, factors, state: CacheState::default() })
    }

    pub fn state(&self) -> &CacheState {
        &self.state
    }

    pub fn ranks(&self) -> &RankConfig {
        &self.ranks
    }

    fn full_pass(&mut self, x: &[f64], t: u32, cond: Cond, ledger: &mut PassLedger) -> Vec<f64> {
        let dims = self.net.block_dims();
        let b = matches!(cond, Cond::Null) as usize;
        let mut h = self.net.embed(x, t, cond);
        let n = self.net.n_blocks();
        let mut h_ins = Vec::with_capacity(n);
        let mut h_outs = Vec::with_capacity(n);
        for l in 0..n {
            let h_out = self.net.block_forward(l, &h);
            ledger.record_full_block(l, dims);
            h_ins.push(h.clone());
            h_outs.push(h_out.clone());
            h = h_out;
        }
        self.state.pending[b] = Some((h_ins, h_outs));
        self.state.last_full_step = Some(t);
        self.net.readout(&h)
    }

    fn reuse_pass(&mut self, x: &[f64], t: u32, cond: Cond, ledger: &mut PassLedger) -> Vec<f64> {
        let dims = self.net.block_dims();
        let b = matches!(cond, Cond::Null) as usize;
        let mut h = self.net.embed(x, t, cond);
        let n = self.net.n_blocks();
        let mut h_ins = Vec::with_capacity(n);
        let mut h_outs = Vec::with_capacity(n);
        for l in 0..n {
            let cache = &self.state.branches[b];
            let h_out = if self.policy.calibrate {
                let delta = &h - &cache.h_in[l];
                let corr = self.factors[l].apply(&delta);
                ledger.record_calibrated_block(l, self.factors[l].r, dims);
                &cache.h_out[l] + corr
            } else {
                ledger.record_cached_block(l);
                cache.h_out[l].clone()
            };
            h_ins.push(h.clone());
            h_outs.push(h_out.clone());
            h = h_out;
        }
        self.state.pending[b] = Some((h_ins, h_outs));
        self.net.readout(&h)
    }
}

impl NoisePredictor for CachedBlockNet<'_> {
    fn dim(&self) -> usize {
        self.net.config().data_dim
    }

    fn predict(&mut self, x: &[f64], t: u32, cond: Cond, ledger: &mut PassLedger) -> Result<Vec<f64>> {
        let b = matches!(cond, Cond::Null) as usize;
        let i = self.state.step_index;
        let out = if self.policy.is_full_step(i) {
            self.full_pass(x, t, cond, ledger)
        } else if self.state.branches[b].valid {
            self.reuse_pass(x, t, cond, ledger)
        } else {
            // branch was not executed at the previous step: cached features
            // describe some older state, recompute
            ledger.record_fallback();
            self.full_pass(x, t, cond, ledger)
        };
        Ok(out)
    }

    fn begin_step(&mut self, step_index: usize, _t: u32) {
        self.state.step_index = step_index;
    }

    fn end_step(&mut self) {
        for b in 0..2 {
            match self.state.pending[b].take() {
                Some((h_in, h_out)) => {
                    self.state.branches[b] = BranchCache { h_in, h_out, valid: true };
                }
                None => {
                    if self.policy.guidance_rule {
                        self.state.branches[b].valid = false;
                    }
                }
            }
        }
        self.state.step_index += 1;
    }
}
