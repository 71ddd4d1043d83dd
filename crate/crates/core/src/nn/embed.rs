//! Sinusoidal timestep embedding with a learned two-layer projection.

use crate::error::{Error, Result};
use crate::nn::layers::{silu_backward, silu_forward, ActivationCache, Linear, LinearCache};
use crate::nn::tensor::Tensor2D;
use crate::rng::Stream;

/// Raw sinusoidal features of the normalized timestep `t / total`:
/// a block of sines followed by a block of cosines over frequencies
/// `omega_j = 10000^(-2j/dim)`, `j = 0..dim/2 - 1`.
pub fn sinusoidal_embedding(t: usize, total: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!(
            "time embedding dim must be even, got {dim}"
        )));
    }
    if t > total {
        return Err(Error::Config(format!(
            "timestep {t} out of range 0..={total}"
        )));
    }
    let t_norm = t as f64 / total as f64;
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let omega = 10_000f64.powf(-2.0 * j as f64 / dim as f64);
        let phase = t_norm * omega;
        out[j] = phase.sin();
        out[half + j] = phase.cos();
    }
    Ok(out)
}

/// Learned projection applied to the raw sinusoidal features:
/// `Linear -> SiLU -> Linear`, both layers square in `dim`.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub lin1: Linear,
    pub lin2: Linear,
}

#[derive(Debug, Clone)]
pub struct TimeEmbedCache {
    /// Raw sinusoidal rows, before the projection.
    pub raw: Tensor2D,
    lin1: LinearCache,
    act: ActivationCache,
    lin2: LinearCache,
}

impl TimeEmbedding {
    pub fn new(dim: usize, rng: &mut Stream) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time embedding dim must be even, got {dim}"
            )));
        }
        Ok(TimeEmbedding {
            dim,
            lin1: Linear::new(dim, dim, rng),
            lin2: Linear::new(dim, dim, rng),
        })
    }

    /// Raw features for a batch of timesteps, one row each.
    pub fn raw_batch(&self, ts: &[usize], total: usize) -> Result<Tensor2D> {
        let mut rows = Vec::with_capacity(ts.len());
        for &t in ts {
            rows.push(sinusoidal_embedding(t, total, self.dim)?);
        }
        Tensor2D::from_rows(&rows)
    }

    /// Project raw features through the two learned layers.
    pub fn project(&self, raw: &Tensor2D) -> Result<(Tensor2D, TimeEmbedCache)> {
        let (a, lin1) = self.lin1.forward(raw)?;
        let (s, act) = silu_forward(&a);
        let (out, lin2) = self.lin2.forward(&s)?;
        Ok((
            out,
            TimeEmbedCache {
                raw: raw.clone(),
                lin1,
                act,
                lin2,
            },
        ))
    }

    /// Embed a batch of timesteps in one call.
    pub fn forward(&self, ts: &[usize], total: usize) -> Result<(Tensor2D, TimeEmbedCache)> {
        let raw = self.raw_batch(ts, total)?;
        self.project(&raw)
    }

    /// Accumulate projection-parameter gradients. The gradient with respect
    /// to the raw features is returned for completeness but has no consumer
    /// (the raw embedding is a fixed function of `t`).
    pub fn backward(&mut self, grad_out: &Tensor2D, cache: &TimeEmbedCache) -> Result<Tensor2D> {
        let g = self.lin2.backward(grad_out, &cache.lin2)?;
        let g = silu_backward(&g, &cache.act)?;
        self.lin1.backward(&g, &cache.lin1)
    }

    pub fn params_mut(&mut self) -> Vec<&mut crate::nn::layers::Param> {
        vec![
            &mut self.lin1.weight,
            &mut self.lin1.bias,
            &mut self.lin2.weight,
            &mut self.lin2.bias,
        ]
    }
}
