//! Noise-predictor interface shared by analytic and network models.

use crate::error::Result;
use crate::ledger::PassLedger;

/// Conditioning input for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    /// Class-conditional branch.
    Class(usize),
    /// Null conditioning (unconditional branch).
    Null,
}

/// A model that predicts the noise eps(x_t, t) for either branch.
///
/// Implementations may be stateful across one trajectory (feature caches);
/// the sampler brackets every step with `begin_step`/`end_step`.
pub trait NoisePredictor {
    /// Dimension of the data space.
    fn dim(&self) -> usize;

    /// Predict noise for `x` at timestep `t` under `cond`. Block-level
    /// compute is recorded into `ledger`; pass-level counts are the
    /// sampler's job.
    fn predict(&mut self, x: &[f64], t: u32, cond: Cond, ledger: &mut PassLedger) -> Result<Vec<f64>>;

    fn begin_step(&mut self, _step_index: usize, _t: u32) {}

    fn end_step(&mut self) {}
}
