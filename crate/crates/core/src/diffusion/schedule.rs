//! Linear variance schedule and the three affine diffusion maps.

use serde::{Deserialize, Serialize};

use crate::domain::UtilityVector;
use crate::error::{Error, Result};

/// Forward-process schedule: per-step variances and cumulative signal
/// retention, with the convention `alpha_bar(0) = 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    /// `betas[t - 1]` is the variance at step `t`, linear from
    /// `beta_start` to `beta_end`.
    pub betas: Vec<f64>,
    /// `alpha_bar[t]` is the cumulative product of `1 - beta_s` for
    /// `s <= t`; strictly decreasing, `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::Config(format!(
                "invalid variance bounds [{beta_start}, {beta_end}]"
            )));
        }
        let mut betas = Vec::with_capacity(timesteps);
        for t in 1..=timesteps {
            let frac = if timesteps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (timesteps - 1) as f64
            };
            betas.push(beta_start + frac * (beta_end - beta_start));
        }
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for beta in &betas {
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule {
            timesteps,
            betas,
            alpha_bar,
        })
    }

    /// Defaults: 1000 steps, variance linear from 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02).expect("default schedule")
    }

    /// Cumulative signal retention at `t`, `t` in `0..=timesteps`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::Config(format!(
                "timestep {t} outside 1..={}",
                self.timesteps
            )));
        }
        Ok(())
    }
}

/// Closed-form forward noising: `u_t = sqrt(abar_t) u0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(
    u0: &UtilityVector,
    t: usize,
    eps: &[f64; 2],
    sched: &NoiseSchedule,
) -> Result<UtilityVector> {
    sched.check_timestep(t)?;
    let abar = sched.alpha_bar(t);
    let signal = abar.sqrt();
    let noise = (1.0 - abar).sqrt();
    Ok(UtilityVector([
        signal * u0.0[0] + noise * eps[0],
        signal * u0.0[1] + noise * eps[1],
    ]))
}

/// Invert the forward map from a noise prediction, clipping the clean
/// estimate into `[0, c_max]` componentwise.
pub fn recover_clean(
    u_t: &UtilityVector,
    t: usize,
    eps_hat: &[f64; 2],
    sched: &NoiseSchedule,
    c_max: f64,
) -> Result<UtilityVector> {
    sched.check_timestep(t)?;
    let abar = sched.alpha_bar(t);
    let signal = abar.sqrt();
    let noise = (1.0 - abar).sqrt();
    let mut out = [0.0; 2];
    for i in 0..2 {
        out[i] = ((u_t.0[i] - noise * eps_hat[i]) / signal).clamp(0.0, c_max);
    }
    Ok(UtilityVector(out))
}

/// Deterministic DDIM propagation of the guided clean estimate to `t_next`,
/// then a componentwise drift clamp to `[-c_drift, c_drift]`.
pub fn ddim_step(
    u0_guided: &UtilityVector,
    eps_hat: &[f64; 2],
    t_next: usize,
    sched: &NoiseSchedule,
    c_drift: f64,
) -> Result<UtilityVector> {
    if t_next > sched.timesteps {
        return Err(Error::Config(format!(
            "t_next {t_next} outside 0..={}",
            sched.timesteps
        )));
    }
    let abar = sched.alpha_bar(t_next);
    let signal = abar.sqrt();
    let noise = (1.0 - abar).sqrt();
    let mut out = [0.0; 2];
    for i in 0..2 {
        out[i] = (signal * u0_guided.0[i] + noise * eps_hat[i]).clamp(-c_drift, c_drift);
    }
    Ok(UtilityVector(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_table_constants() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.timesteps, 1000);
        assert_eq!(s.betas[0], 1e-4);
        assert_eq!(s.betas[999], 0.02);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        // Heavily noised by the end of the chain.
        assert!(s.alpha_bar(1000) < 1e-4, "{}", s.alpha_bar(1000));
        assert!(s.alpha_bar(1000) > 1e-5);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!((1e-4..=0.02).contains(&s.betas[t - 1]));
        }
    }

    #[test]
    fn forward_noise_low_t_is_near_identity() {
        let s = NoiseSchedule::default_linear();
        let u0 = UtilityVector([0.6, 0.8]);
        let ut = forward_noise(&u0, 1, &[0.0, 0.0], &s).unwrap();
        assert!((ut.0[0] - 0.6).abs() < 1e-4);
        assert!((ut.0[1] - 0.8).abs() < 1e-4);
    }

    #[test]
    fn forward_noise_zero_eps_scales_by_signal() {
        let s = NoiseSchedule::default_linear();
        let u0 = UtilityVector([0.6, 0.8]);
        let t = 500;
        let ut = forward_noise(&u0, t, &[0.0, 0.0], &s).unwrap();
        let signal = s.alpha_bar(t).sqrt();
        assert_eq!(ut.0[0], signal * 0.6);
        assert_eq!(ut.0[1], signal * 0.8);
    }

    #[test]
    fn forward_noise_terminal_is_mostly_noise() {
        let s = NoiseSchedule::default_linear();
        let u0 = UtilityVector([0.6, 0.8]);
        let ut = forward_noise(&u0, 1000, &[1.0, -1.0], &s).unwrap();
        assert!((ut.0[0] - 1.0).abs() < 0.01, "{:?}", ut);
        assert!((ut.0[1] + 1.0).abs() < 0.01);
    }

    #[test]
    fn out_of_range_timestep_errors() {
        let s = NoiseSchedule::default_linear();
        let u0 = UtilityVector([0.0, 0.0]);
        assert!(forward_noise(&u0, 0, &[0.0, 0.0], &s).is_err());
        assert!(forward_noise(&u0, 1001, &[0.0, 0.0], &s).is_err());
    }

    #[test]
    fn round_trip_recovers_clean_sample() {
        let s = NoiseSchedule::default_linear();
        let u0 = UtilityVector([0.55, 0.71]);
        let eps = [0.34, -1.2];
        for t in [1usize, 10, 100, 500, 900, 1000] {
            if s.alpha_bar(t) <= 1e-8 {
                continue;
            }
            let ut = forward_noise(&u0, t, &eps, &s).unwrap();
            let rec = recover_clean(&ut, t, &eps, &s, 1.2).unwrap();
            assert!((rec.0[0] - u0.0[0]).abs() < 1e-10, "t={t}");
            assert!((rec.0[1] - u0.0[1]).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn recover_clean_clips_into_bounds() {
        let s = NoiseSchedule::default_linear();
        let ut = UtilityVector([0.5, -3.0]);
        let rec = recover_clean(&ut, 500, &[-4.0, 4.0], &s, 1.2).unwrap();
        assert_eq!(rec.0[1], 0.0);
        assert_eq!(rec.0[0], 1.2);
        let mid = recover_clean(&UtilityVector([0.5, 0.5]), 500, &[0.0, 0.0], &s, 1.2).unwrap();
        let expected = (0.5 / s.alpha_bar(500).sqrt()).clamp(0.0, 1.2);
        assert_eq!(mid.0[0], expected);
    }

    #[test]
    fn ddim_step_at_full_signal_returns_estimate() {
        let s = NoiseSchedule::default_linear();
        let u0 = UtilityVector([0.3, 0.9]);
        let out = ddim_step(&u0, &[5.0, -5.0], 0, &s, 1.5).unwrap();
        assert_eq!(out.0, u0.0);
    }

    #[test]
    fn ddim_step_zero_inputs_stay_zero() {
        let s = NoiseSchedule::default_linear();
        let out = ddim_step(&UtilityVector([0.0, 0.0]), &[0.0, 0.0], 400, &s, 1.5).unwrap();
        assert_eq!(out.0, [0.0, 0.0]);
    }

    #[test]
    fn ddim_step_applies_drift_clamp() {
        let s = NoiseSchedule::default_linear();
        let out = ddim_step(&UtilityVector([1.2, -1.2]), &[9.0, -9.0], 900, &s, 1.5).unwrap();
        assert_eq!(out.0, [1.5, -1.5]);
    }
}
