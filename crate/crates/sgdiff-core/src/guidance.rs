//! Per-timestep guidance schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::TimestepGrid;

/// Per-step guidance scales with activation threshold.
///
/// A step is CFG-active iff `w[i] >= tau`; inactive steps run the conditional
/// branch only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    pub w: Vec<f64>,
    pub tau: f64,
    pub w_max: f64,
}

impl GuidanceSchedule {
    pub fn new(w: Vec<f64>, tau: f64, w_max: f64) -> Result<Self> {
        if !(w_max > 0.0) {
            return Err(Error::Config(format!("w_max must be > 0, got {w_max}")));
        }
        if !(tau >= 0.0) {
            return Err(Error::Config(format!("tau must be >= 0, got {tau}")));
        }
        for (i, &v) in w.iter().enumerate() {
            if !(0.0 <= v && v <= w_max) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "guidance w[{i}]={v} outside [0, {w_max}]"
                )));
            }
        }
        Ok(Self { w, tau, w_max })
    }

    /// Constant schedule w_t = w_const for every step.
    pub fn constant(len: usize, w_const: f64, tau: f64, w_max: f64) -> Result<Self> {
        Self::new(vec![w_const; len], tau, w_max)
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.w[i] >= self.tau
    }

    pub fn active_steps(&self) -> usize {
        self.w.iter().filter(|&&v| v >= self.tau).count()
    }

    /// Sparsity S = (T - #active) / T.
    pub fn sparsity(&self) -> f64 {
        let t = self.w.len();
        (t - self.active_steps()) as f64 / t as f64
    }
}

/// On-disk schedule format: `{w, tau, w_max, grid}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub w: Vec<f64>,
    pub tau: f64,
    pub w_max: f64,
    pub grid: Vec<u32>,
}

impl ScheduleFile {
    pub fn new(sched: &GuidanceSchedule, grid: &TimestepGrid) -> Self {
        Self {
            w: sched.w.clone(),
            tau: sched.tau,
            w_max: sched.w_max,
            grid: grid.steps().to_vec(),
        }
    }

    pub fn schedule(&self) -> Result<GuidanceSchedule> {
        if self.w.len() != self.grid.len() {
            return Err(Error::Config("schedule w and grid lengths differ".into()));
        }
        GuidanceSchedule::new(self.w.clone(), self.tau, self.w_max)
    }

    pub fn grid(&self, t_max: u32) -> Result<TimestepGrid> {
        TimestepGrid::from_steps(self.grid.clone(), t_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_is_inclusive_at_tau() {
        let g = GuidanceSchedule::new(vec![0.15, 0.1499, 0.0], 0.15, 3.0).unwrap();
        assert!(g.is_active(0));
        assert!(!g.is_active(1));
        assert!(!g.is_active(2));
        assert_eq!(g.active_steps(), 1);
        assert!((g.sparsity() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(GuidanceSchedule::new(vec![3.1], 0.1, 3.0).is_err());
        assert!(GuidanceSchedule::new(vec![-0.1], 0.1, 3.0).is_err());
        assert!(GuidanceSchedule::new(vec![1.0], -0.1, 3.0).is_err());
        assert!(GuidanceSchedule::new(vec![1.0], 0.1, 0.0).is_err());
    }
}
