//! Distribution distances and pass accounting. W1 (1D) and energy distance
//! stand in for the usual image-space metrics at this scale; reports label
//! them explicitly so they are never confused with FID numbers.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceSchedule;
use crate::mixture::GridDensity;

/// Exact 1D Wasserstein-1 between two empirical distributions.
///
/// Equal sample counts reduce to the sorted coupling; unequal counts use the
/// exact piecewise quantile-function integral.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "W1 needs non-empty samples");
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    if sa.len() == sb.len() {
        return sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64;
    }
    let (n, m) = (sa.len(), sb.len());
    let mut i = 0usize;
    let mut j = 0usize;
    let mut q = 0.0f64;
    let mut acc = 0.0f64;
    while i < n && j < m {
        let qa = (i + 1) as f64 / n as f64;
        let qb = (j + 1) as f64 / m as f64;
        let qn = qa.min(qb);
        acc += (qn - q) * (sa[i] - sb[j]).abs();
        if qa <= qn + f64::EPSILON && qa <= qb {
            i += 1;
        }
        if qb <= qn + f64::EPSILON && qb <= qa {
            j += 1;
        }
        if (qa - qb).abs() < f64::EPSILON {
            // both advanced above
        }
        q = qn;
    }
    acc
}

/// Exact-ish W1 between an empirical sample and a tabulated density:
/// integrates |F_emp - F_dens| over the union of grid nodes and sample
/// points (trapezoid between breakpoints).
pub fn wasserstein_to_density(samples: &[f64], density: &GridDensity) -> f64 {
    assert!(!samples.is_empty());
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut breaks: Vec<f64> = density.xs.clone();
    breaks.extend_from_slice(&s);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let f_emp = |x: f64| -> f64 { s.partition_point(|&v| v <= x) as f64 / n };
    let mut acc = 0.0;
    let mut prev_x = breaks[0];
    let mut prev_d = (f_emp(prev_x) - density.cdf_at(prev_x)).abs();
    for &x in &breaks[1..] {
        let d = (f_emp(x) - density.cdf_at(x)).abs();
        // evaluate just left of the step too, so jumps do not smear
        let d_left = (f_emp(x - f64::EPSILON.max(x.abs() * 1e-14)) - density.cdf_at(x)).abs();
        acc += 0.5 * (prev_d + d_left) * (x - prev_x);
        prev_x = x;
        prev_d = d;
    }
    acc
}

fn sum_abs_pair_dists_sorted(a: &[f64], b: &[f64]) -> f64 {
    // sum over all (i, j) of |a_i - b_j| with both inputs sorted
    let prefix: Vec<f64> = a
        .iter()
        .scan(0.0, |acc, &v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let total: f64 = prefix.last().copied().unwrap_or(0.0);
    let n = a.len();
    b.iter()
        .map(|&y| {
            let k = a.partition_point(|&v| v <= y);
            let below = if k > 0 { prefix[k - 1] } else { 0.0 };
            y * k as f64 - below + (total - below) - y * (n - k) as f64
        })
        .sum()
}

fn mean_pair_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for x in a {
        for y in b {
            let d: f64 = x
                .iter()
                .zip(y)
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            acc += d;
        }
    }
    acc / (a.len() * b.len()) as f64
}

/// Energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| over all empirical pairs
/// (V-statistic). 1D input uses an O(n log n) sorted path.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let dim = a[0].len();
    assert!(a.iter().chain(b).all(|v| v.len() == dim), "dimension mismatch");
    if dim == 1 {
        let mut sa: Vec<f64> = a.iter().map(|v| v[0]).collect();
        let mut sb: Vec<f64> = b.iter().map(|v| v[0]).collect();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let (n, m) = (sa.len() as f64, sb.len() as f64);
        let e_ab = sum_abs_pair_dists_sorted(&sa, &sb) / (n * m);
        let e_aa = sum_abs_pair_dists_sorted(&sa, &sa) / (n * n);
        let e_bb = sum_abs_pair_dists_sorted(&sb, &sb) / (m * m);
        2.0 * e_ab - e_aa - e_bb
    } else {
        2.0 * mean_pair_dist(a, b) - mean_pair_dist(a, a) - mean_pair_dist(b, b)
    }
}

/// Forward-pass totals implied by a guidance schedule:
/// (T + #active, #active).
pub fn count_passes(gsched: &GuidanceSchedule) -> (u64, u64) {
    let cfg_steps = gsched.active_steps() as u64;
    (gsched.len() as u64 + cfg_steps, cfg_steps)
}

/// Distribution-distance summary attached to reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistReport {
    pub wasserstein1: Option<f64>,
    pub energy_distance: Option<f64>,
    pub mse_to_reference: Option<f64>,
    pub sample_count: usize,
}

/// Fixed-width histogram with integrated density columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_left: Vec<f64>,
    pub bin_right: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn from_samples(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &x in samples {
            if x >= lo && x < hi {
                counts[((x - lo) / width) as usize] += 1;
            } else if x == hi {
                counts[bins - 1] += 1;
            }
        }
        let n = samples.len() as f64;
        Self {
            bin_left: (0..bins).map(|i| lo + width * i as f64).collect(),
            bin_right: (0..bins).map(|i| lo + width * (i + 1) as f64).collect(),
            density: counts.iter().map(|&c| c as f64 / (n * width)).collect(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "bin_left,bin_right,density")?;
        for i in 0..self.bin_left.len() {
            writeln!(f, "{},{},{}", self.bin_left[i], self.bin_right[i], self.density[i])?;
        }
        Ok(())
    }
}

/// Density table CSV in the same (bin_left, bin_right, density) layout.
pub fn write_density_csv(d: &GridDensity, path: &Path) -> Result<()> {
    if d.xs.len() < 2 {
        return Err(Error::Dimension("density grid too short".into()));
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "bin_left,bin_right,density")?;
    for i in 0..d.xs.len() - 1 {
        let mid = 0.5 * (d.pdf[i] + d.pdf[i + 1]);
        writeln!(f, "{},{},{mid}", d.xs[i], d.xs[i + 1])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn w1_identical_is_zero() {
        let a = vec![0.3, -1.0, 2.5];
        assert_eq!(wasserstein_1d(&a, &a), 0.0);
    }

    #[test]
    fn w1_pure_shift() {
        assert!((wasserstein_1d(&[0.0, 0.0], &[1.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    /// Independent oracle: integrate |F_a - F_b| over the x axis between
    /// pooled sample breakpoints (CDFs are constant there, so this is exact).
    fn w1_cdf_oracle(a: &[f64], b: &[f64]) -> f64 {
        let mut pool: Vec<f64> = a.iter().chain(b).copied().collect();
        pool.sort_by(f64::total_cmp);
        pool.dedup();
        let mut sa = a.to_vec();
        let mut sb = b.to_vec();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let mut acc = 0.0;
        for w in pool.windows(2) {
            let fa = sa.partition_point(|&v| v <= w[0]) as f64 / sa.len() as f64;
            let fb = sb.partition_point(|&v| v <= w[0]) as f64 / sb.len() as f64;
            acc += (fa - fb).abs() * (w[1] - w[0]);
        }
        acc
    }

    #[test]
    fn w1_matches_cdf_quadrature_100v100() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..100)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 + 1.3 * z
            })
            .collect();
        let d = wasserstein_1d(&a, &b);
        let oracle = w1_cdf_oracle(&a, &b);
        assert!((d - oracle).abs() < 1e-9, "{d} vs {oracle}");
    }

    #[test]
    fn w1_unequal_counts_matches_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..73).map(|_| rng.random::<f64>() * 3.0).collect();
        let b: Vec<f64> = (0..41).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let d = wasserstein_1d(&a, &b);
        let oracle = w1_cdf_oracle(&a, &b);
        assert!((d - oracle).abs() < 1e-9, "{d} vs {oracle}");
    }

    #[test]
    fn energy_distance_cases() {
        let a = vec![vec![0.5], vec![0.5]];
        let b = vec![vec![1.5], vec![1.5]];
        assert!((energy_distance(&a, &b) - 2.0).abs() < 1e-12);
        assert!(energy_distance(&a, &a).abs() < 1e-12);
        // 1D fast path agrees with the generic pairwise path
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..57).map(|_| vec![StandardNormal.sample(&mut rng)]).collect();
        let ys: Vec<Vec<f64>> =
            (0..31).map(|_| vec![0.7 + 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)]).collect();
        let fast = energy_distance(&xs, &ys);
        let slow = 2.0 * mean_pair_dist(&xs, &ys) - mean_pair_dist(&xs, &xs) - mean_pair_dist(&ys, &ys);
        assert!((fast - slow).abs() < 1e-10);
    }

    #[test]
    fn energy_distance_vs_large_mc_reference() {
        // 1e4-vs-1e4 all-pairs estimate against a 1e6-pair Monte-Carlo
        // reference of the population quantity for two Gaussians.
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let n = 10_000;
        let a: Vec<Vec<f64>> = (0..n).map(|_| vec![StandardNormal.sample(&mut rng)]).collect();
        let b: Vec<Vec<f64>> =
            (0..n).map(|_| vec![1.0 + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)]).collect();
        let est = energy_distance(&a, &b);

        let mut mc = ChaCha12Rng::seed_from_u64(43);
        let pairs = 1_000_000usize;
        let (mut e_ab, mut e_aa, mut e_bb) = (0.0, 0.0, 0.0);
        for _ in 0..pairs {
            let x: f64 = StandardNormal.sample(&mut mc);
            let xp: f64 = StandardNormal.sample(&mut mc);
            let y: f64 = 1.0 + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut mc);
            let yp: f64 = 1.0 + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut mc);
            e_ab += (x - y).abs();
            e_aa += (x - xp).abs();
            e_bb += (y - yp).abs();
        }
        let reference = (2.0 * e_ab - e_aa - e_bb) / pairs as f64;
        let rel = (est - reference).abs() / reference.abs();
        assert!(rel < 0.05, "est {est} vs MC reference {reference} (rel {rel})");
    }

    #[test]
    fn count_passes_cases() {
        let mut w = vec![0.0; 50];
        for i in 0..8 {
            w[i * 6] = 1.0;
        }
        let g = GuidanceSchedule::new(w, 0.15, 3.0).unwrap();
        assert_eq!(count_passes(&g), (58, 8));
        let mut w = vec![0.0; 50];
        for i in 0..9 {
            w[i * 5] = 2.0;
        }
        let g = GuidanceSchedule::new(w, 0.15, 3.0).unwrap();
        assert_eq!(count_passes(&g), (59, 9));
        let g = GuidanceSchedule::new(vec![0.0; 20], 0.15, 3.0).unwrap();
        assert_eq!(count_passes(&g), (20, 0));
    }

    #[test]
    fn wasserstein_to_density_sanity() {
        // density = uniform on [0,1]; empirical = the same quartile points
        let xs: Vec<f64> = (0..1001).map(|i| i as f64 / 1000.0).collect();
        let pdf = vec![1.0; 1001];
        let d = GridDensity::from_unnormalized(xs, pdf).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let samples: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
        let w = wasserstein_to_density(&samples, &d);
        assert!(w < 0.01, "uniform-vs-uniform W1 was {w}");
        let shifted: Vec<f64> = samples.iter().map(|v| v + 0.5).collect();
        let w = wasserstein_to_density(&shifted, &d);
        assert!((w - 0.5).abs() < 0.01, "shifted W1 was {w}");
    }

    proptest! {
        #[test]
        fn w1_triangle_inequality(
            a in proptest::collection::vec(-50.0f64..50.0, 1..40),
            b in proptest::collection::vec(-50.0f64..50.0, 1..40),
            c in proptest::collection::vec(-50.0f64..50.0, 1..40),
        ) {
            let dab = wasserstein_1d(&a, &b);
            let dbc = wasserstein_1d(&b, &c);
            let dac = wasserstein_1d(&a, &c);
            prop_assert!(dac <= dab + dbc + 1e-12);
        }

        #[test]
        fn w1_symmetry_and_nonnegativity(
            a in proptest::collection::vec(-10.0f64..10.0, 1..30),
            b in proptest::collection::vec(-10.0f64..10.0, 1..30),
        ) {
            let dab = wasserstein_1d(&a, &b);
            let dba = wasserstein_1d(&b, &a);
            prop_assert!(dab >= 0.0);
            prop_assert!((dab - dba).abs() < 1e-12);
        }
    }
}
