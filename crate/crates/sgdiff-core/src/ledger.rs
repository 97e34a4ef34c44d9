//! Exact accounting of forward passes and block-level compute.
//!
//! The MAC model counts block matrix products and calibration applications
//! only; embeddings and readouts are constant across methods and excluded.

use serde::{Deserialize, Serialize};

/// Widths of one residual block, for the MAC cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
}

impl BlockDims {
    /// Full block evaluation cost: d_in*d_hidden + d_hidden*d_out MACs.
    pub fn full_macs(&self) -> f64 {
        (self.d_in * self.d_hidden + self.d_hidden * self.d_out) as f64
    }

    /// Rank-r calibrated application cost: r*(d_in + d_out) MACs.
    pub fn calibrated_macs(&self, r: usize) -> f64 {
        (r * (self.d_in + self.d_out)) as f64
    }
}

/// Per-run (or per-step) tally of model evaluations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PassLedger {
    pub cond_passes: u64,
    pub uncond_passes: u64,
    /// Reuse steps that had to fall back to full compute because the branch
    /// was not executed at the previous step.
    pub cache_fallbacks: u64,
    /// Per-layer counts of fully computed blocks.
    pub full_blocks: Vec<u64>,
    /// Per-layer counts of calibrated (low-rank corrected) reuse.
    pub calibrated_blocks: Vec<u64>,
    /// Per-layer counts of raw cached reuse (no calibration applied).
    pub cached_blocks: Vec<u64>,
    /// Multiply-accumulate estimate under the block cost model.
    pub mac_estimate: f64,
}

impl PassLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn grow(v: &mut Vec<u64>, layer: usize) -> &mut u64 {
        if v.len() <= layer {
            v.resize(layer + 1, 0);
        }
        &mut v[layer]
    }

    pub fn record_cond_pass(&mut self) {
        self.cond_passes += 1;
    }

    pub fn record_uncond_pass(&mut self) {
        self.uncond_passes += 1;
    }

    pub fn record_fallback(&mut self) {
        self.cache_fallbacks += 1;
    }

    pub fn record_full_block(&mut self, layer: usize, dims: BlockDims) {
        *Self::grow(&mut self.full_blocks, layer) += 1;
        self.mac_estimate += dims.full_macs();
    }

    pub fn record_calibrated_block(&mut self, layer: usize, r: usize, dims: BlockDims) {
        *Self::grow(&mut self.calibrated_blocks, layer) += 1;
        self.mac_estimate += dims.calibrated_macs(r);
    }

    pub fn record_cached_block(&mut self, layer: usize) {
        *Self::grow(&mut self.cached_blocks, layer) += 1;
    }

    pub fn total_forward_passes(&self) -> u64 {
        self.cond_passes + self.uncond_passes
    }

    pub fn total_full_blocks(&self) -> u64 {
        self.full_blocks.iter().sum()
    }

    pub fn total_calibrated_blocks(&self) -> u64 {
        self.calibrated_blocks.iter().sum()
    }

    pub fn total_cached_blocks(&self) -> u64 {
        self.cached_blocks.iter().sum::<u64>() + self.total_calibrated_blocks()
    }

    /// Fold `other` into this ledger.
    pub fn merge(&mut self, other: &PassLedger) {
        self.cond_passes += other.cond_passes;
        self.uncond_passes += other.uncond_passes;
        self.cache_fallbacks += other.cache_fallbacks;
        for (i, &c) in other.full_blocks.iter().enumerate() {
            *Self::grow(&mut self.full_blocks, i) += c;
        }
        for (i, &c) in other.calibrated_blocks.iter().enumerate() {
            *Self::grow(&mut self.calibrated_blocks, i) += c;
        }
        for (i, &c) in other.cached_blocks.iter().enumerate() {
            *Self::grow(&mut self.cached_blocks, i) += c;
        }
        self.mac_estimate += other.mac_estimate;
    }

    /// Merge a sequence of ledgers in order (deterministic reduction).
    pub fn merged<'a>(ledgers: impl IntoIterator<Item = &'a PassLedger>) -> PassLedger {
        let mut total = PassLedger::new();
        for l in ledgers {
            total.merge(l);
        }
        total
    }

    /// Export view with the count fields named by the ledger JSON interface.
    pub fn export(&self) -> LedgerExport {
        LedgerExport {
            cond_passes: self.cond_passes,
            uncond_passes: self.uncond_passes,
            cached_blocks: self.total_cached_blocks(),
            calibrated_blocks: self.total_calibrated_blocks(),
            mac_estimate: self.mac_estimate,
            cache_fallbacks: self.cache_fallbacks,
            full_blocks: self.total_full_blocks(),
        }
    }
}

/// JSON shape of a ledger: `{cond_passes, uncond_passes, cached_blocks,
/// calibrated_blocks, mac_estimate}` plus fallback/full-block extras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerExport {
    pub cond_passes: u64,
    pub uncond_passes: u64,
    pub cached_blocks: u64,
    pub calibrated_blocks: u64,
    pub mac_estimate: f64,
    pub cache_fallbacks: u64,
    pub full_blocks: u64,
}
