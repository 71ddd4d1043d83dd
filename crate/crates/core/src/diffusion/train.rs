//! Two-phase training of the encoder and denoiser.
//!
//! Phase 1 minimizes the noise-prediction MSE. Phase 2 adds the normative
//! regularizer evaluated on the clipped in-training clean estimate, with
//! the IR weight annealed linearly across the phase-2 epochs. Encoder and
//! denoiser train jointly end to end; all draws derive from the run seed.

use serde::{Deserialize, Serialize};

use crate::diffusion::denoiser::DenoiserParams;
use crate::diffusion::schedule::NoiseSchedule;
use crate::domain::{DatasetSplit, NegotiationInstance};
use crate::encoder::{encode, encode_backward, EncodeCache, EncoderParams};
use crate::error::{Error, Result};
use crate::guidance::{guide_grad, guide_loss, GuidanceConfig};
use crate::nn::optim::{AdamW, AdamWConfig};
use crate::nn::tensor::Tensor2D;
use crate::rng::Stream;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs before the normative regularizer switches on.
    pub phase1_epochs: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    /// IR weight at the first phase-2 epoch.
    pub ir_weight_start: f64,
    /// IR weight at the last epoch.
    pub ir_weight_end: f64,
    /// Clip bound for the in-training clean estimate.
    pub c_max: f64,
    /// Source of the alpha/gamma/delta/eps/radius values for the phase-2
    /// regularizer (its beta field is replaced by the annealed IR weight).
    pub guidance: GuidanceConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            phase1_epochs: 15,
            batch_size: 256,
            adamw: AdamWConfig::default(),
            ir_weight_start: 10.0,
            ir_weight_end: 50.0,
            c_max: 1.2,
            guidance: GuidanceConfig::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// 1 or 2.
    pub phase: u8,
    pub l_mse: f64,
    pub l_guide: f64,
    pub beta_ir: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,l_mse,l_guide,beta_ir,lr\n");
        for e in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.phase, e.l_mse, e.l_guide, e.beta_ir, e.lr
            ));
        }
        out
    }
}

/// IR weight for `epoch`, linear from `start` at the first phase-2 epoch to
/// `end` at the final epoch.
fn annealed_ir_weight(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch < cfg.phase1_epochs {
        return 0.0;
    }
    let last = cfg.epochs.saturating_sub(1);
    let span = last.saturating_sub(cfg.phase1_epochs);
    if span == 0 {
        return cfg.ir_weight_start;
    }
    let frac = (epoch - cfg.phase1_epochs) as f64 / span as f64;
    cfg.ir_weight_start + frac * (cfg.ir_weight_end - cfg.ir_weight_start)
}

/// Train encoder and denoiser on the train split of `dataset`.
pub fn train(
    dataset: &DatasetSplit,
    encoder: &mut EncoderParams,
    denoiser: &mut DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let instances: Vec<&NegotiationInstance> = dataset.train();
    if instances.is_empty() {
        return Err(Error::Config("train split is empty".to_string()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config(
            "batch size and epochs must be positive".to_string(),
        ));
    }
    cfg.guidance.validate()?;
    let targets: Result<Vec<[f64; 2]>> = instances
        .iter()
        .map(|inst| {
            inst.reference_utility
                .as_ref()
                .map(|u| u.0)
                .ok_or_else(|| {
                    Error::Config("training instance lacks a reference utility".to_string())
                })
        })
        .collect();
    let targets = targets?;

    let n = instances.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut adamw_cfg = cfg.adamw;
    adamw_cfg.horizon = cfg.epochs * steps_per_epoch;
    let mut optimizer = AdamW::new(adamw_cfg);

    let mut shuffle_rng = Stream::derive(cfg.seed, "train/shuffle");
    let mut noise_rng = Stream::derive(cfg.seed, "train/noise");

    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let phase2 = epoch >= cfg.phase1_epochs;
        let beta_ir = annealed_ir_weight(cfg, epoch);
        let phase2_guidance = GuidanceConfig {
            beta: beta_ir,
            ..cfg.guidance
        };

        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);

        let mut mse_sum = 0.0;
        let mut guide_sum = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let m = chunk.len();

            // Conditioning contexts (forward encoder per element).
            let mut contexts = Tensor2D::zeros(m, denoiser.context_dim);
            let mut enc_caches: Vec<EncodeCache> = Vec::with_capacity(m);
            for (row, &idx) in chunk.iter().enumerate() {
                let (h, cache) = encode(instances[idx], encoder)?;
                contexts.row_mut(row).copy_from_slice(&h.0);
                enc_caches.push(cache);
            }

            // Noise the clean targets at per-element random timesteps.
            let mut ts = Vec::with_capacity(m);
            let mut eps = Vec::with_capacity(m);
            let mut states = Tensor2D::zeros(m, 2);
            for (row, &idx) in chunk.iter().enumerate() {
                let t = noise_rng.below(sched.timesteps as u64) as usize + 1;
                let (e0, e1) = noise_rng.normal_pair();
                let abar = sched.alpha_bar(t);
                let (sig, noi) = (abar.sqrt(), (1.0 - abar).sqrt());
                let u0 = targets[idx];
                *states.at_mut(row, 0) = sig * u0[0] + noi * e0;
                *states.at_mut(row, 1) = sig * u0[1] + noi * e1;
                ts.push(t);
                eps.push([e0, e1]);
            }

            let (eps_hat, den_cache) =
                denoiser.forward(&states, &ts, sched.timesteps, &contexts)?;

            // MSE term and its gradient (mean over the batch of squared
            // two-component norms).
            let mut l_mse = 0.0;
            let mut grad_eps = Tensor2D::zeros(m, 2);
            for row in 0..m {
                for c in 0..2 {
                    let diff = eps_hat.at(row, c) - eps[row][c];
                    l_mse += diff * diff / m as f64;
                    *grad_eps.at_mut(row, c) = 2.0 * diff / m as f64;
                }
            }

            // Phase-2 regularizer on the clipped in-training clean estimate.
            let mut l_guide = 0.0;
            if phase2 {
                for (row, &idx) in chunk.iter().enumerate() {
                    let abar = sched.alpha_bar(ts[row]);
                    let (sig, noi) = (abar.sqrt(), (1.0 - abar).sqrt());
                    let mut u0_hat = [0.0; 2];
                    let mut unclipped = [0.0; 2];
                    for c in 0..2 {
                        let raw = (states.at(row, c) - noi * eps_hat.at(row, c)) / sig;
                        unclipped[c] = raw;
                        u0_hat[c] = raw.clamp(0.0, cfg.c_max);
                    }
                    let d = instances[idx].disagreement();
                    let uhat = crate::domain::UtilityVector(u0_hat);
                    l_guide += guide_loss(&uhat, &d, &phase2_guidance) / m as f64;
                    let g = guide_grad(&uhat, &d, &phase2_guidance);
                    for c in 0..2 {
                        // Chain rule through the clip gate and the recovery
                        // map (d u0_hat / d eps_hat = -noi / sig).
                        if unclipped[c] > 0.0 && unclipped[c] < cfg.c_max {
                            *grad_eps.at_mut(row, c) += g[c] / m as f64 * (-noi / sig);
                        }
                    }
                }
            }

            let total_loss = l_mse + l_guide;
            if !total_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batch_idx} \
                     (l_mse={l_mse}, l_guide={l_guide})"
                )));
            }

            // Backward through denoiser, then through the encoder per element.
            encoder.zero_grads();
            denoiser.zero_grads();
            let (_, grad_contexts) = denoiser.backward(&grad_eps, &den_cache)?;
            for (row, cache) in enc_caches.iter().enumerate() {
                encode_backward(encoder, grad_contexts.row(row), cache)?;
            }

            let mut params = encoder.params_mut();
            params.extend(denoiser.params_mut());
            optimizer.step(&mut params)?;

            mse_sum += l_mse * m as f64;
            guide_sum += l_guide * m as f64;
            seen += m;
        }

        report.log.push(EpochLog {
            epoch,
            phase: if phase2 { 2 } else { 1 },
            l_mse: mse_sum / seen as f64,
            l_guide: guide_sum / seen as f64,
            beta_ir,
            lr: optimizer.learning_rate(),
        });
    }
    Ok(report)
}
