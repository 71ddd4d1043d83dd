//! AdamW with decoupled weight decay and half-cosine learning-rate decay.

use crate::error::{Error, Result};
use crate::nn::layers::Param;
use crate::nn::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the learning rate anneals from `base_lr` to 0.
    pub horizon: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            horizon: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// First/second moment buffers, one pair per parameter tensor, in the
    /// order the parameters are presented to `step`.
    moments: Vec<(Tensor2D, Tensor2D)>,
    /// Completed steps; 1-based inside bias correction.
    pub step_count: usize,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            moments: Vec::new(),
            step_count: 0,
        }
    }

    /// Learning rate for the next step: half-cosine from `base_lr` to 0
    /// over `horizon` steps, clamped at the final value beyond it.
    pub fn learning_rate(&self) -> f64 {
        let progress = if self.cfg.horizon == 0 {
            1.0
        } else {
            (self.step_count as f64 / self.cfg.horizon as f64).min(1.0)
        };
        self.cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Apply one update to every parameter from its accumulated gradient,
    /// then advance the step counter. Gradients are not cleared here.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| {
                    (
                        Tensor2D::zeros(p.value.rows, p.value.cols),
                        Tensor2D::zeros(p.value.rows, p.value.cols),
                    )
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Shape {
                op: "adamw step",
                expected: format!("{} parameter tensors", self.moments.len()),
                got: format!("{}", params.len()),
            });
        }
        let lr = self.learning_rate();
        let t = (self.step_count + 1) as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (param, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            if param.value.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adamw step",
                    expected: format!("{:?}", m.shape()),
                    got: format!("{:?}", param.value.shape()),
                });
            }
            for i in 0..param.value.data.len() {
                let g = param.grad.data[i];
                m.data[i] = self.cfg.beta1 * m.data[i] + (1.0 - self.cfg.beta1) * g;
                v.data[i] = self.cfg.beta2 * v.data[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                let update = m_hat / (v_hat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * param.value.data[i];
                param.value.data[i] -= lr * update;
            }
            param.value.check_finite("adamw step")?;
        }
        self.step_count += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f64) -> Param {
        Param::new(Tensor2D::from_vec(1, 1, vec![value]).unwrap())
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut p = scalar_param(0.7);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            horizon: 10,
            ..AdamWConfig::default()
        });
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data[0], 0.7);
    }

    #[test]
    fn lr_at_horizon_midpoint_is_half_base() {
        let mut opt = AdamW::new(AdamWConfig {
            horizon: 100,
            ..AdamWConfig::default()
        });
        opt.step_count = 50;
        assert!((opt.learning_rate() - 0.5e-3).abs() < 1e-15);
    }

    #[test]
    fn lr_clamps_beyond_horizon() {
        let mut opt = AdamW::new(AdamWConfig {
            horizon: 10,
            ..AdamWConfig::default()
        });
        opt.step_count = 25;
        assert!(opt.learning_rate().abs() < 1e-18);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With g = 1: m_hat = 1, v_hat = 1, so the update is
        // lr / (1 + eps_adam), independent of beta values.
        let mut p = scalar_param(0.0);
        p.grad.data[0] = 1.0;
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            horizon: 1000,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut [&mut p]).unwrap();
        let expected = -cfg.base_lr / (1.0 + cfg.eps);
        assert!(
            (p.value.data[0] - expected).abs() < 1e-15,
            "{} vs {expected}",
            p.value.data[0]
        );
        assert!((p.value.data[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient() {
        let mut p = scalar_param(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            horizon: 1000,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut [&mut p]).unwrap();
        let lr0 = cfg.base_lr; // first step runs at full base LR
        assert!((p.value.data[0] - (1.0 - lr0 * 0.1)).abs() < 1e-12);
    }
}
