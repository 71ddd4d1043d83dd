//! Differentiable normative guidance: the three-term loss over utility
//! estimates, its closed-form gradient, and the adaptive projected
//! correction step applied inside the sampler's guidance window.
//!
//! The loss combines a log-barrier on surpluses (Nash alignment), a smooth
//! penalty on individual-rationality violations with margin `delta`, and a
//! smooth penalty on leaving the frontier ball. Softplus replaces hard
//! maxima throughout so the gradient is nonzero everywhere, including
//! deeply infeasible states.

use serde::{Deserialize, Serialize};

use crate::domain::UtilityVector;
use crate::error::{Error, Result};
use crate::oracle::project_feasible;

/// All knobs of the guided correction. Together with a seed this fully
/// determines a guided trajectory.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Correction step size.
    pub lambda: f64,
    /// Activation fraction: guidance applies when `t/T < t_start`
    /// (every step when `t_start = 1`).
    pub t_start: f64,
    /// Nash (log-barrier) weight.
    pub alpha: f64,
    /// Individual-rationality penalty weight.
    pub beta: f64,
    /// Frontier-adherence penalty weight.
    pub gamma: f64,
    /// IR strictness margin.
    pub delta: f64,
    /// Numerical stability constant, shared by the log barrier and the
    /// gradient-normalization denominator.
    pub eps_num: f64,
    /// Frontier radius.
    pub radius: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda: 0.35,
            t_start: 0.25,
            alpha: 10.0,
            beta: 8.0,
            gamma: 15.0,
            delta: 0.05,
            eps_num: 1e-6,
            radius: 1.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("eps_num", self.eps_num),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("guidance.{name} = {v} must be >= 0")));
            }
        }
        if !(self.t_start > 0.0 && self.t_start <= 1.0) {
            return Err(Error::Config(format!(
                "guidance.t_start = {} must lie in (0, 1]",
                self.t_start
            )));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!(
                "guidance.radius = {} must be positive",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Overflow-safe `log(1 + e^x)`; for `x > 30` the linear branch is exact to
/// double precision.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Three-term guidance loss at `u` for disagreement vector `d`.
pub fn guide_loss(u: &UtilityVector, d: &[f64; 2], cfg: &GuidanceConfig) -> f64 {
    let mut nash = 0.0;
    let mut ir = 0.0;
    for i in 0..2 {
        let surplus = u.0[i] - d[i];
        nash -= (softplus(surplus) + cfg.eps_num).ln();
        ir += softplus(d[i] - u.0[i] + cfg.delta);
    }
    let sq_norm = u.0[0] * u.0[0] + u.0[1] * u.0[1];
    let frontier = softplus(0.5 * (sq_norm - cfg.radius * cfg.radius));
    cfg.alpha * nash + cfg.beta * ir + cfg.gamma * frontier
}

/// Closed-form gradient of [`guide_loss`] with respect to `u`:
///
/// `dL/du_i = -alpha * s(u_i - d_i) / (softplus(u_i - d_i) + eps)`
/// `          - beta * s(d_i - u_i + delta)`
/// `          + gamma * s((|u|^2 - r^2) / 2) * u_i`
///
/// where `s` is the logistic sigmoid. Every sigmoid factor lies in (0, 1),
/// and the barrier factor is capped by `1/eps`, so the gradient stays
/// finite arbitrarily deep into the infeasible region.
pub fn guide_grad(u: &UtilityVector, d: &[f64; 2], cfg: &GuidanceConfig) -> [f64; 2] {
    let sq_norm = u.0[0] * u.0[0] + u.0[1] * u.0[1];
    let frontier_sig = sigmoid(0.5 * (sq_norm - cfg.radius * cfg.radius));
    let mut g = [0.0; 2];
    for i in 0..2 {
        let surplus = u.0[i] - d[i];
        let nash = -cfg.alpha * sigmoid(surplus) / (softplus(surplus) + cfg.eps_num);
        let ir = -cfg.beta * sigmoid(d[i] - u.0[i] + cfg.delta);
        let frontier = cfg.gamma * frontier_sig * u.0[i];
        g[i] = nash + ir + frontier;
    }
    g
}

/// One adaptive guided correction: a normalized gradient step of length
/// `w = lambda * sqrt(alpha_bar)` followed by projection onto the feasible
/// ball.
pub fn guided_correction(
    u0_hat: &UtilityVector,
    d: &[f64; 2],
    alpha_bar: f64,
    cfg: &GuidanceConfig,
) -> UtilityVector {
    let g = guide_grad(u0_hat, d, cfg);
    let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
    let w = cfg.lambda * alpha_bar.sqrt();
    let scale = w / (norm + cfg.eps_num);
    let stepped = UtilityVector([u0_hat.0[0] - scale * g[0], u0_hat.0[1] - scale * g[1]]);
    project_feasible(&stepped, cfg.radius)
}

/// Norm of the guidance gradient (trajectory diagnostics).
pub fn guide_grad_norm(u: &UtilityVector, d: &[f64; 2], cfg: &GuidanceConfig) -> f64 {
    let g = guide_grad(u, d, cfg);
    (g[0] * g[0] + g[1] * g[1]).sqrt()
}

/// Whether guidance is active at timestep `t` of `total`. The window is
/// `t/T < t_start`; `t_start = 1` means every step, including `t = T`.
pub fn guidance_active(t: usize, total: usize, t_start: f64) -> bool {
    t_start >= 1.0 || (t as f64) / (total as f64) < t_start
}

/// Empirical finite-entry surrogate: iterate the guided correction at full
/// signal (`alpha_bar = 1`) from `u_start` and report the first iteration
/// index at which both components satisfy `u_i >= d_i`, or `None` within
/// `max_steps`.
pub fn ir_entry_time(
    u_start: &UtilityVector,
    d: &[f64; 2],
    cfg: &GuidanceConfig,
    max_steps: usize,
) -> Option<usize> {
    let in_ir = |u: &UtilityVector| u.0[0] >= d[0] && u.0[1] >= d[1];
    let mut u = *u_start;
    if in_ir(&u) {
        return Some(0);
    }
    for step in 1..=max_steps {
        u = guided_correction(&u, d, 1.0, cfg);
        if in_ir(&u) {
            return Some(step);
        }
    }
    None
}
