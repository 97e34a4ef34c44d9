//! Noise schedules (cumulative alpha-bar) and sampling-step grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the training-grid betas are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Betas linearly spaced between two endpoints.
    LinearBeta,
    /// Squared-cosine alpha-bar with the usual 0.999 beta clip.
    Cosine,
}

/// Cumulative noise schedule over the training grid t = 1..=t_max.
///
/// `alpha_bar(0)` is defined as 1 so the final denoising step lands on clean
/// data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    t_max: u32,
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;

impl NoiseSchedule {
    /// Build a schedule. `params` are the (start, end) beta endpoints for
    /// `LinearBeta`; `Cosine` ignores them.
    pub fn build(kind: ScheduleKind, t_max: u32, params: (f64, f64)) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::Config(format!("t_max must be >= 2, got {t_max}")));
        }
        let alpha_bar = match kind {
            ScheduleKind::LinearBeta => {
                let (b0, b1) = params;
                if !(0.0 < b0 && b0 < 1.0 && 0.0 < b1 && b1 < 1.0) {
                    return Err(Error::Config(format!(
                        "beta endpoints must lie in (0,1), got ({b0}, {b1})"
                    )));
                }
                let mut acc = 1.0;
                (0..t_max)
                    .map(|i| {
                        let beta = b0 + (b1 - b0) * i as f64 / (t_max - 1) as f64;
                        acc *= 1.0 - beta;
                        acc
                    })
                    .collect::<Vec<_>>()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let arg = (t / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                        * std::f64::consts::FRAC_PI_2;
                    arg.cos().powi(2)
                };
                let mut acc = 1.0;
                (1..=t_max)
                    .map(|t| {
                        // beta_t = 1 - f(t)/f(t-1), clipped at 0.999
                        let ratio = (f(t as f64) / f(t as f64 - 1.0)).max(0.001);
                        acc *= ratio;
                        acc
                    })
                    .collect::<Vec<_>>()
            }
        };
        let sched = Self { kind, t_max, alpha_bar };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        let ab = &self.alpha_bar;
        if ab.len() != self.t_max as usize {
            return Err(Error::Config("alpha_bar length != t_max".into()));
        }
        if !(ab[0] <= 1.0) || !(ab[ab.len() - 1] > 0.0) {
            return Err(Error::Config("alpha_bar must satisfy a_1 <= 1 and a_Tmax > 0".into()));
        }
        for w in ab.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_max(&self) -> u32 {
        self.t_max
    }

    /// Cumulative alpha-bar at timestep `t`, with the boundary alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: u32) -> f64 {
        assert!(t <= self.t_max, "timestep {t} beyond t_max {}", self.t_max);
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[(t - 1) as usize]
        }
    }
}

/// Strictly decreasing sampling timesteps drawn from 1..=t_max.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepGrid {
    steps: Vec<u32>,
}

impl TimestepGrid {
    /// Uniform stride over the training grid, largest timestep first.
    pub fn uniform(t: usize, t_max: u32) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        if t as u32 > t_max {
            return Err(Error::Config(format!("T={t} exceeds t_max={t_max}")));
        }
        let steps = (0..t)
            .map(|i| {
                let pos = t_max as f64 * (t - i) as f64 / t as f64;
                (pos.round() as u32).max(1)
            })
            .collect();
        Self::from_steps(steps, t_max)
    }

    pub fn from_steps(steps: Vec<u32>, t_max: u32) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        for &s in &steps {
            if s < 1 || s > t_max {
                return Err(Error::Config(format!("grid step {s} outside 1..={t_max}")));
            }
        }
        for w in steps.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config("grid steps must be strictly decreasing".into()));
            }
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    pub fn step(&self, i: usize) -> u32 {
        self.steps[i]
    }

    /// Destination timestep of grid position `i` (0 past the end of the grid).
    pub fn prev(&self, i: usize) -> u32 {
        if i + 1 < self.steps.len() {
            self.steps[i + 1]
        } else {
            0
        }
    }
}
