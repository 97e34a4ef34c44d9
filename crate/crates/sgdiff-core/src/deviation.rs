//! Closed-form denoising deviations caused by guidance changes between
//! adjacent steps. Diagnostics for the caching stage.

use crate::schedule::NoiseSchedule;

/// DDIM noise coefficient for the jump t -> t_prev:
/// beta = sqrt(1 - ab_prev) - sqrt(ab_prev * (1 - ab_t) / ab_t).
pub fn ddim_noise_coeff(sched: &NoiseSchedule, t: u32, t_prev: u32) -> f64 {
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    (1.0 - ab_prev).sqrt() - (ab_prev * (1.0 - ab_t) / ab_t).sqrt()
}

/// Deviation when both steps are CFG-active but the scale changes from
/// `w_t` to `w_prev`. `exact=false` uses the sqrt(ab_prev/ab_t) coefficient
/// approximation instead of the exact noise coefficient.
#[allow(clippy::too_many_arguments)]
pub fn deviation_scale(
    eps_c: &[f64],
    eps_u: &[f64],
    w_t: f64,
    w_prev: f64,
    t: u32,
    t_prev: u32,
    sched: &NoiseSchedule,
    exact: bool,
) -> Vec<f64> {
    let coeff = if exact {
        ddim_noise_coeff(sched, t, t_prev)
    } else {
        (sched.alpha_bar(t_prev) / sched.alpha_bar(t)).sqrt()
    };
    let factor = coeff * (w_prev - w_t);
    eps_c
        .iter()
        .zip(eps_u)
        .map(|(&c, &u)| factor * (c - u))
        .collect()
}

/// Deviation when step t is CFG-active and the next step switches to the
/// conditional-only branch (equivalent to w_prev = 1).
pub fn deviation_switch(
    eps_c: &[f64],
    eps_u: &[f64],
    w_t: f64,
    t: u32,
    t_prev: u32,
    sched: &NoiseSchedule,
) -> Vec<f64> {
    let factor = ddim_noise_coeff(sched, t, t_prev) * (1.0 - w_t);
    eps_c
        .iter()
        .zip(eps_u)
        .map(|(&c, &u)| factor * (c - u))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{apply_cfg, ddim_step};
    use crate::schedule::ScheduleKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleKind::LinearBeta, 1000, (1e-4, 0.02)).unwrap()
    }

    #[test]
    fn zero_when_scales_equal_or_branches_agree() {
        let s = sched();
        let d = deviation_scale(&[1.0, 2.0], &[0.5, 0.5], 1.5, 1.5, 600, 580, &s, true);
        assert!(d.iter().all(|&v| v == 0.0));
        let d = deviation_scale(&[0.7, -0.3], &[0.7, -0.3], 1.5, 2.5, 600, 580, &s, true);
        assert!(d.iter().all(|&v| v == 0.0));
        let d = deviation_switch(&[1.0], &[0.0], 1.0, 600, 580, &s);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_two_run_ddim_difference() {
        let s = sched();
        let (t, t_prev) = (500, 480);
        let x = vec![1.0];
        let eps_c = vec![1.0];
        let eps_u = vec![0.0];
        let (w_t, w_prev) = (1.5, 2.0);
        let a = ddim_step(&x, &apply_cfg(&eps_u, &eps_c, w_prev), t, t_prev, &s, 0.0, None).unwrap();
        let b = ddim_step(&x, &apply_cfg(&eps_u, &eps_c, w_t), t, t_prev, &s, 0.0, None).unwrap();
        let measured: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
        let predicted = deviation_scale(&eps_c, &eps_u, w_t, w_prev, t, t_prev, &s, true);
        assert!((measured[0] - predicted[0]).abs() < 1e-12);
    }

    #[test]
    fn switch_sign_opposite_to_scale_increase() {
        // For w_t > 1 the switch deviation opposes a scale increase.
        let s = sched();
        let (t, t_prev) = (400, 380);
        let eps_c = vec![1.0];
        let eps_u = vec![0.2];
        let w_t = 1.5;
        let up = deviation_scale(&eps_c, &eps_u, w_t, 2.0, t, t_prev, &s, true);
        let sw = deviation_switch(&eps_c, &eps_u, w_t, t, t_prev, &s);
        assert!(up[0] * sw[0] < 0.0, "expected opposite signs, got {} and {}", up[0], sw[0]);
    }

    #[test]
    fn approx_coeff_differs_from_exact() {
        let s = sched();
        let exact = deviation_scale(&[1.0], &[0.0], 1.0, 2.0, 500, 480, &s, true);
        let approx = deviation_scale(&[1.0], &[0.0], 1.0, 2.0, 500, 480, &s, false);
        assert!((exact[0] - approx[0]).abs() > 1e-6);
        let coeff = (s.alpha_bar(480) / s.alpha_bar(500)).sqrt();
        assert!((approx[0] - coeff).abs() < 1e-15);
    }
}
