//! Deterministic guided DDIM inference.
//!
//! The chain runs over `steps` evenly spaced timesteps from `T` down to 1.
//! Each step predicts the injected noise, recovers the clipped clean
//! estimate, applies the guided correction inside the activation window,
//! and propagates with the drift-clamped DDIM update. The terminal step
//! returns the guided clean estimate directly instead of the DDIM output
//! (which would collapse to the raw noise prediction at zero signal).

use serde::{Deserialize, Serialize};

use crate::diffusion::denoiser::DenoiserParams;
use crate::diffusion::schedule::{ddim_step, recover_clean, NoiseSchedule};
use crate::domain::{NegotiationInstance, UtilityVector};
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::guidance::{guidance_active, guide_grad_norm, guided_correction, GuidanceConfig};
use crate::nn::tensor::Tensor2D;
use crate::oracle::{frontier_distance, nash_product};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of DDIM inference steps.
    pub steps: usize,
    /// Componentwise upper clip of the clean estimate.
    pub c_max: f64,
    /// Componentwise clamp bound on intermediate latents. `f64::INFINITY`
    /// disables the clamp (used by the stability regression checks).
    pub c_drift: f64,
    /// Root seed for noise initialization.
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            c_max: 1.2,
            c_drift: 1.5,
            seed: 42,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, total_timesteps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > total_timesteps {
            return Err(Error::Config(format!(
                "sampler steps {} outside 1..={total_timesteps}",
                self.steps
            )));
        }
        if !(self.c_max > 0.0) || !(self.c_drift > 0.0) {
            return Err(Error::Config(
                "sampler clip bounds must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-step log of a sampling trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: usize,
    pub t: usize,
    /// Latent state entering the step.
    pub u_t: [f64; 2],
    /// Clean estimate before guidance.
    pub u0_pre: [f64; 2],
    /// Clean estimate after guidance (equal to `u0_pre` outside the window).
    pub u0_post: [f64; 2],
    /// Guidance gradient norm at `u0_pre`; zero outside the window.
    pub grad_norm: f64,
    pub nash_product: f64,
    pub frontier_distance: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub steps: Vec<TrajectoryStep>,
}

/// `steps` timesteps evenly spaced from `total` down to 1, inclusive.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!(
            "cannot place {steps} DDIM steps in 1..={total}"
        )));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let mut ts = Vec::with_capacity(steps);
    for i in 0..steps {
        let frac = i as f64 / (steps - 1) as f64;
        let t = (total as f64 - frac * (total - 1) as f64).round() as usize;
        ts.push(t);
    }
    for w in ts.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::Config(format!(
                "DDIM grid not strictly decreasing for {steps} steps over {total}"
            )));
        }
    }
    Ok(ts)
}

/// Standard-normal initialization for one chain, derived from the per-run
/// seed so guided and unguided runs can share it exactly.
pub fn initial_noise(seed: u64) -> [f64; 2] {
    let mut rng = Stream::derive(seed, "sampler/u_T");
    let (a, b) = rng.normal_pair();
    [a, b]
}

/// Run guided DDIM inference for one instance from the given noise
/// initialization. `guidance: None` is the unguided baseline; the guidance
/// configuration is then never read.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    instance: &NegotiationInstance,
    encoder: &EncoderParams,
    denoiser: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    guidance: Option<&GuidanceConfig>,
    u_init: [f64; 2],
    trace: bool,
) -> Result<(UtilityVector, Option<TrajectoryRecord>)> {
    cfg.validate(sched.timesteps)?;
    if let Some(g) = guidance {
        g.validate()?;
    }
    let (h, _) = encode(instance, encoder)?;
    let d = instance.disagreement();
    let grid = ddim_timesteps(sched.timesteps, cfg.steps)?;
    let mut record = trace.then(TrajectoryRecord::default);

    let mut u = UtilityVector(u_init);
    for (i, &t) in grid.iter().enumerate() {
        let eps_hat = denoiser.predict_noise(&u.0, t, sched.timesteps, &h)?;
        let u0_pre = recover_clean(&u, t, &eps_hat, sched, cfg.c_max)?;
        let active = guidance
            .map(|g| guidance_active(t, sched.timesteps, g.t_start))
            .unwrap_or(false);
        let (u0_post, grad_norm) = if active {
            let g = guidance.expect("active implies guidance present");
            (
                guided_correction(&u0_pre, &d, sched.alpha_bar(t), g),
                guide_grad_norm(&u0_pre, &d, g),
            )
        } else {
            (u0_pre, 0.0)
        };

        if let Some(rec) = record.as_mut() {
            rec.steps.push(TrajectoryStep {
                step: i,
                t,
                u_t: u.0,
                u0_pre: u0_pre.0,
                u0_post: u0_post.0,
                grad_norm,
                nash_product: nash_product(&u0_post, &d),
                frontier_distance: frontier_distance(&u0_post, instance.radius),
            });
        }

        if i + 1 == grid.len() {
            // Terminal step: the guided clean estimate is the sample.
            return Ok((u0_post, record));
        }
        u = ddim_step(&u0_post, &eps_hat, grid[i + 1], sched, cfg.c_drift)?;
    }
    unreachable!("grid is nonempty");
}

/// Batched sampling over instances that share the timestep grid. Row `b`
/// reproduces `sample(instances[b], .., u_inits[b], false)` bitwise; the
/// batch dimension only amortizes the matrix products.
pub fn sample_batch(
    instances: &[&NegotiationInstance],
    encoder: &EncoderParams,
    denoiser: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    guidance: Option<&GuidanceConfig>,
    u_inits: &[[f64; 2]],
) -> Result<Vec<UtilityVector>> {
    cfg.validate(sched.timesteps)?;
    if let Some(g) = guidance {
        g.validate()?;
    }
    if instances.len() != u_inits.len() {
        return Err(Error::Config(format!(
            "sample_batch: {} instances vs {} initializations",
            instances.len(),
            u_inits.len()
        )));
    }
    if instances.is_empty() {
        return Ok(Vec::new());
    }
    let batch = instances.len();
    let mut contexts = Tensor2D::zeros(batch, denoiser.context_dim);
    let mut disagreements = Vec::with_capacity(batch);
    for (b, inst) in instances.iter().enumerate() {
        let (h, _) = encode(inst, encoder)?;
        contexts.row_mut(b).copy_from_slice(&h.0);
        disagreements.push(inst.disagreement());
    }

    let grid = ddim_timesteps(sched.timesteps, cfg.steps)?;
    let mut states = Tensor2D::zeros(batch, 2);
    for (b, init) in u_inits.iter().enumerate() {
        states.row_mut(b).copy_from_slice(init);
    }

    let mut outputs = vec![UtilityVector([0.0, 0.0]); batch];
    for (i, &t) in grid.iter().enumerate() {
        let ts = vec![t; batch];
        let (eps_hat, _) = denoiser.forward(&states, &ts, sched.timesteps, &contexts)?;
        let terminal = i + 1 == grid.len();
        for b in 0..batch {
            let u = UtilityVector([states.at(b, 0), states.at(b, 1)]);
            let eh = [eps_hat.at(b, 0), eps_hat.at(b, 1)];
            let u0_pre = recover_clean(&u, t, &eh, sched, cfg.c_max)?;
            let active = guidance
                .map(|g| guidance_active(t, sched.timesteps, g.t_start))
                .unwrap_or(false);
            let u0_post = if active {
                guided_correction(
                    &u0_pre,
                    &disagreements[b],
                    sched.alpha_bar(t),
                    guidance.expect("active implies guidance present"),
                )
            } else {
                u0_pre
            };
            if terminal {
                outputs[b] = u0_post;
            } else {
                let next = ddim_step(&u0_post, &eh, grid[i + 1], sched, cfg.c_drift)?;
                states.row_mut(b).copy_from_slice(&next.0);
            }
        }
    }
    Ok(outputs)
}
