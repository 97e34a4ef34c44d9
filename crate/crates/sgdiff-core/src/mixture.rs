//! Analytic Gaussian-mixture data models: exact noise predictions for the
//! forward marginals, guided target densities, and the class-conditional
//! predictor used throughout the 1D/2D experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::PassLedger;
use crate::model::{Cond, NoisePredictor};
use crate::schedule::NoiseSchedule;

/// One isotropic Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: f64,
}

/// A finite isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    comps: Vec<MixtureComponent>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(comps: Vec<MixtureComponent>) -> Result<Self> {
        if comps.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let dim = comps[0].mean.len();
        let mut total = 0.0;
        for c in &comps {
            if c.mean.len() != dim {
                return Err(Error::Dimension("mixture component dims differ".into()));
            }
            if !(c.var > 0.0) {
                return Err(Error::Config(format!("component variance must be > 0, got {}", c.var)));
            }
            if !(c.weight >= 0.0) {
                return Err(Error::Config("component weights must be >= 0".into()));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self { comps, dim })
    }

    /// Reweighted union of several mixtures (used for class marginals).
    pub fn weighted_union(parts: &[(f64, &GaussianMixture)]) -> Result<Self> {
        let mut comps = Vec::new();
        for (prior, gm) in parts {
            for c in &gm.comps {
                comps.push(MixtureComponent {
                    weight: prior * c.weight,
                    mean: c.mean.clone(),
                    var: c.var,
                });
            }
        }
        Self::new(comps)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.comps
    }

    /// Log density of the forward marginal at timestep `t` (t=0 is the data
    /// density): components become N(sqrt(ab)*m, ab*s^2 + 1 - ab).
    pub fn log_density_t(&self, x: &[f64], t: u32, sched: &NoiseSchedule) -> f64 {
        let ab = sched.alpha_bar(t);
        let d = self.dim as f64;
        let mut max_log = f64::NEG_INFINITY;
        let logs: Vec<f64> = self
            .comps
            .iter()
            .map(|c| {
                let vt = ab * c.var + (1.0 - ab);
                let sq: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(&xi, &mi)| {
                        let r = xi - ab.sqrt() * mi;
                        r * r
                    })
                    .sum();
                let l = c.weight.max(f64::MIN_POSITIVE).ln()
                    - 0.5 * d * (2.0 * std::f64::consts::PI * vt).ln()
                    - sq / (2.0 * vt);
                max_log = max_log.max(l);
                l
            })
            .collect();
        max_log + logs.iter().map(|l| (l - max_log).exp()).sum::<f64>().ln()
    }

    /// Exact noise prediction for the forward marginal:
    /// eps*(x, t) = -sqrt(1 - ab) * grad_x log p_t(x), computed with
    /// log-space responsibilities.
    pub fn eps_star(&self, x: &[f64], t: u32, sched: &NoiseSchedule) -> Vec<f64> {
        let ab = sched.alpha_bar(t);
        let sqrt_ab = ab.sqrt();
        let mut logs = Vec::with_capacity(self.comps.len());
        let d = self.dim as f64;
        let mut max_log = f64::NEG_INFINITY;
        for c in &self.comps {
            let vt = ab * c.var + (1.0 - ab);
            let sq: f64 = x
                .iter()
                .zip(&c.mean)
                .map(|(&xi, &mi)| {
                    let r = xi - sqrt_ab * mi;
                    r * r
                })
                .sum();
            let l = c.weight.max(f64::MIN_POSITIVE).ln()
                - 0.5 * d * (2.0 * std::f64::consts::PI * vt).ln()
                - sq / (2.0 * vt);
            max_log = max_log.max(l);
            logs.push(l);
        }
        let mut resp: Vec<f64> = logs.iter().map(|l| (l - max_log).exp()).collect();
        let z: f64 = resp.iter().sum();
        for r in &mut resp {
            *r /= z;
        }
        let mut eps = vec![0.0; self.dim];
        for (c, &r) in self.comps.iter().zip(&resp) {
            let vt = ab * c.var + (1.0 - ab);
            for j in 0..self.dim {
                eps[j] += r * (x[j] - sqrt_ab * c.mean[j]) / vt;
            }
        }
        let scale = (1.0 - ab).sqrt();
        for e in &mut eps {
            *e *= scale;
        }
        eps
    }
}

/// Normalized density tabulated on a uniform 1D grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridDensity {
    pub xs: Vec<f64>,
    pub pdf: Vec<f64>,
    cdf: Vec<f64>,
}

impl GridDensity {
    pub fn from_unnormalized(xs: Vec<f64>, mut pdf: Vec<f64>) -> Result<Self> {
        if xs.len() != pdf.len() || xs.len() < 2 {
            return Err(Error::Dimension("grid density needs matching xs/pdf, len >= 2".into()));
        }
        let mut cdf = vec![0.0; xs.len()];
        for i in 1..xs.len() {
            cdf[i] = cdf[i - 1] + 0.5 * (pdf[i] + pdf[i - 1]) * (xs[i] - xs[i - 1]);
        }
        let mass = cdf[xs.len() - 1];
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::Config("density has numerically zero or invalid mass".into()));
        }
        for v in &mut pdf {
            *v /= mass;
        }
        for v in &mut cdf {
            *v /= mass;
        }
        Ok(Self { xs, pdf, cdf })
    }

    /// Trapezoid CDF at grid point i.
    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    /// Linear-interpolated CDF at an arbitrary point (0 left of the grid,
    /// 1 right of it).
    pub fn cdf_at(&self, x: f64) -> f64 {
        let xs = &self.xs;
        if x <= xs[0] {
            return 0.0;
        }
        if x >= xs[xs.len() - 1] {
            return 1.0;
        }
        let i = xs.partition_point(|&v| v <= x) - 1;
        let frac = (x - xs[i]) / (xs[i + 1] - xs[i]);
        // pdf is linear between nodes, so the cdf is quadratic; linear
        // interpolation is accurate to the grid resolution we use.
        self.cdf[i] + frac * (self.cdf[i + 1] - self.cdf[i])
    }
}

/// Tilted guided target: density proportional to p_u(x) * (p_c(x)/p_u(x))^w
/// on a uniform grid. 1D only.
pub fn mixture_guided_target(
    gm_c: &GaussianMixture,
    gm_u: &GaussianMixture,
    w: f64,
    lo: f64,
    hi: f64,
    points: usize,
    sched: &NoiseSchedule,
) -> Result<GridDensity> {
    if gm_c.dim() != 1 || gm_u.dim() != 1 {
        return Err(Error::Dimension("guided target is 1D only".into()));
    }
    if !(w >= 0.0) {
        return Err(Error::Config("guidance exponent must be >= 0".into()));
    }
    if points < 2 || !(hi > lo) {
        return Err(Error::Config("bad density grid".into()));
    }
    let xs: Vec<f64> = (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect();
    let mut logq = Vec::with_capacity(points);
    let mut max_log = f64::NEG_INFINITY;
    for &x in &xs {
        let lc = gm_c.log_density_t(&[x], 0, sched);
        let lu = gm_u.log_density_t(&[x], 0, sched);
        let l = w * lc + (1.0 - w) * lu;
        max_log = max_log.max(l);
        logq.push(l);
    }
    let pdf: Vec<f64> = logq.iter().map(|l| (l - max_log).exp()).collect();
    GridDensity::from_unnormalized(xs, pdf)
}

/// Class-conditional mixture model: `Cond::Class(k)` scores class k's
/// sub-mixture, `Cond::Null` scores the prior-weighted marginal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureModel {
    classes: Vec<GaussianMixture>,
    priors: Vec<f64>,
    marginal: GaussianMixture,
    sched: NoiseSchedule,
}

impl MixtureModel {
    pub fn new(classes: Vec<GaussianMixture>, priors: Vec<f64>, sched: NoiseSchedule) -> Result<Self> {
        if classes.is_empty() || classes.len() != priors.len() {
            return Err(Error::Config("need one prior per class".into()));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("class priors sum to {total}, expected 1")));
        }
        let parts: Vec<(f64, &GaussianMixture)> =
            priors.iter().copied().zip(classes.iter()).collect();
        let marginal = GaussianMixture::weighted_union(&parts)?;
        Ok(Self { classes, priors, marginal, sched })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, k: usize) -> &GaussianMixture {
        &self.classes[k]
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn marginal(&self) -> &GaussianMixture {
        &self.marginal
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }
}

impl NoisePredictor for MixtureModel {
    fn dim(&self) -> usize {
        self.marginal.dim()
    }

    fn predict(&mut self, x: &[f64], t: u32, cond: Cond, _ledger: &mut PassLedger) -> Result<Vec<f64>> {
        let gm = match cond {
            Cond::Class(k) => {
                if k >= self.classes.len() {
                    return Err(Error::Config(format!("class {k} out of range")));
                }
                &self.classes[k]
            }
            Cond::Null => &self.marginal,
        };
        Ok(gm.eps_star(x, t, &self.sched))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleKind::LinearBeta, 1000, (1e-4, 0.02)).unwrap()
    }

    fn gm1(parts: &[(f64, f64, f64)]) -> GaussianMixture {
        GaussianMixture::new(
            parts
                .iter()
                .map(|&(w, m, v)| MixtureComponent { weight: w, mean: vec![m], var: v })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn point_mass_eps_is_forward_inversion() {
        // s^2 ~ 0: eps*(x) = (x - sqrt(ab)*m) / sqrt(1 - ab)
        let s = sched();
        let gm = gm1(&[(1.0, 0.7, 1e-18)]);
        let t = 400;
        let ab = s.alpha_bar(t);
        let x = 0.3;
        let eps = gm.eps_star(&[x], t, &s);
        let expect = (x - ab.sqrt() * 0.7) / (1.0 - ab).sqrt();
        assert!((eps[0] - expect).abs() < 1e-9, "{} vs {expect}", eps[0]);
    }

    #[test]
    fn symmetric_mixture_mode_matches_pure_noise_direction() {
        // At x=0, the two-component symmetric mixture's score offset cancels:
        // eps* reduces to the single-Gaussian eps at the shared envelope.
        let s = sched();
        let gm = gm1(&[(0.5, -1.0, 0.25), (0.5, 1.0, 0.25)]);
        let t = 300;
        let eps = gm.eps_star(&[0.0], t, &s);
        let ab = s.alpha_bar(t);
        let vt = ab * 0.25 + (1.0 - ab);
        // responsibilities are 1/2 each; the mean terms cancel
        let expect = (1.0 - ab).sqrt() * (0.0 / vt);
        assert!((eps[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn eps_matches_finite_difference_score() {
        let s = sched();
        let gm = gm1(&[(0.4, -1.0, 0.09), (0.6, 0.5, 0.25)]);
        // pick t with ab close to 0.5
        let t = (1..=1000).min_by_key(|&t| ((s.alpha_bar(t) - 0.5).abs() * 1e9) as i64).unwrap();
        let x = 0.3;
        let h = 1e-5;
        let grad =
            (gm.log_density_t(&[x + h], t, &s) - gm.log_density_t(&[x - h], t, &s)) / (2.0 * h);
        let eps = gm.eps_star(&[x], t, &s);
        let expect = -(1.0 - s.alpha_bar(t)).sqrt() * grad;
        assert!((eps[0] - expect).abs() < 1e-6, "{} vs {expect}", eps[0]);
    }

    #[test]
    fn eps_score_relation_2d() {
        let s = sched();
        let gm = GaussianMixture::new(vec![
            MixtureComponent { weight: 0.3, mean: vec![-1.0, 0.5], var: 0.2 },
            MixtureComponent { weight: 0.7, mean: vec![0.8, -0.4], var: 0.5 },
        ])
        .unwrap();
        let t = 250;
        let x = [0.2, -0.1];
        let h = 1e-5;
        let eps = gm.eps_star(&x, t, &s);
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let grad = (gm.log_density_t(&xp, t, &s) - gm.log_density_t(&xm, t, &s)) / (2.0 * h);
            let expect = -(1.0 - s.alpha_bar(t)).sqrt() * grad;
            let rel = (eps[j] - expect).abs() / expect.abs().max(1e-9);
            assert!(rel < 1e-5, "component {j}: {} vs {expect}", eps[j]);
        }
    }

    #[test]
    fn no_underflow_in_far_tails() {
        let s = sched();
        let gm = gm1(&[(0.5, -1.0, 0.04), (0.5, 1.0, 0.04)]);
        let eps = gm.eps_star(&[500.0], 1, &s);
        assert!(eps[0].is_finite());
    }

    #[test]
    fn guided_target_limits() {
        let s = sched();
        let c = gm1(&[(1.0, -0.5, 0.25)]);
        let u = gm1(&[(0.5, -0.5, 0.25), (0.5, 0.5, 0.25)]);
        let q1 = mixture_guided_target(&c, &u, 1.0, -6.0, 6.0, 2001, &s).unwrap();
        let q0 = mixture_guided_target(&c, &u, 0.0, -6.0, 6.0, 2001, &s).unwrap();
        for (i, &x) in q1.xs.iter().enumerate().step_by(100) {
            let pc = c.log_density_t(&[x], 0, &s).exp();
            let pu = u.log_density_t(&[x], 0, &s).exp();
            assert!((q1.pdf[i] - pc).abs() < 1e-6);
            assert!((q0.pdf[i] - pu).abs() < 1e-6);
        }
    }

    #[test]
    fn guided_target_normalization_matches_quadrature() {
        // The normalization constant against a brute-force trapezoid of the
        // unnormalized tilt.
        let s = sched();
        let c = gm1(&[(1.0, -0.5, 0.25)]);
        let u = gm1(&[(0.5, -0.5, 0.25), (0.5, 0.5, 0.25)]);
        let (lo, hi, n) = (-8.0, 8.0, 8001);
        let q = mixture_guided_target(&c, &u, 1.5, lo, hi, n, &s).unwrap();
        // brute force: integrate the raw tilt on the same grid
        let mut raw = Vec::with_capacity(n);
        for i in 0..n {
            let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            let lc = c.log_density_t(&[x], 0, &s);
            let lu = u.log_density_t(&[x], 0, &s);
            raw.push((1.5 * lc - 0.5 * lu).exp());
        }
        let dx = (hi - lo) / (n - 1) as f64;
        let mass: f64 = raw.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dx).sum();
        for i in (0..n).step_by(500) {
            assert!((q.pdf[i] - raw[i] / mass).abs() < 1e-8);
        }
    }

    #[test]
    fn forward_marginal_matches_monte_carlo() {
        // the forward marginal of a mixture is the mixture of forward
        // marginals: histogram KL against the analytic density at 1e5 draws
        use rand::SeedableRng;
        use rand_chacha::ChaCha12Rng;
        use rand_distr::{Distribution, StandardNormal};
        let s = sched();
        let gm = gm1(&[(0.35, -0.6, 0.49), (0.65, 0.6, 0.49)]);
        let t = 400;
        let ab = s.alpha_bar(t);
        let n = 100_000;
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rand::Rng::random(&mut rng);
            let (m, v): (f64, f64) = if u < 0.35 { (-0.6, 0.49) } else { (0.6, 0.49) };
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            let x0 = m + v.sqrt() * z0;
            draws.push(ab.sqrt() * x0 + (1.0 - ab).sqrt() * z1);
        }
        let (lo, hi, bins) = (-5.0, 5.0, 60);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        let mut inside = 0usize;
        for &x in &draws {
            if x >= lo && x < hi {
                counts[((x - lo) / width) as usize] += 1;
                inside += 1;
            }
        }
        let mut kl = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let p = c as f64 / inside as f64;
            let mid = lo + width * (i as f64 + 0.5);
            let q = gm.log_density_t(&[mid], t, &s).exp() * width;
            kl += p * (p / q).ln();
        }
        assert!(kl.abs() <= 0.01, "KL(MC || analytic) = {kl}");
    }

    #[test]
    fn model_json_round_trip() {
        let s = sched();
        let model = MixtureModel::new(
            vec![gm1(&[(1.0, -0.5, 0.2)]), gm1(&[(0.3, 0.0, 0.1), (0.7, 1.0, 0.4)])],
            vec![0.25, 0.75],
            s,
        )
        .unwrap();
        let text = serde_json::to_string(&model).unwrap();
        let mut back: MixtureModel = serde_json::from_str(&text).unwrap();
        let mut ledger = crate::ledger::PassLedger::new();
        let a = model.clone().predict(&[0.4], 300, Cond::Class(1), &mut ledger).unwrap();
        let b = back.predict(&[0.4], 300, Cond::Class(1), &mut ledger).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(GaussianMixture::new(vec![MixtureComponent {
            weight: 0.9,
            mean: vec![0.0],
            var: 1.0
        }])
        .is_err());
    }
}
