//! Conditional MLP noise predictor.
//!
//! Input per element is the concatenation `[u_t || t_emb || h]`; the stack
//! is Linear -> LN -> SiLU -> Linear -> LN -> SiLU -> Linear, and the final
//! output is scaled by a small constant `c_out` so the clean estimate stays
//! controlled where the signal level is tiny.

use crate::encoder::ContextEmbedding;
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::embed::{TimeEmbedCache, TimeEmbedding};
use crate::nn::layers::{
    silu_backward, silu_forward, ActivationCache, LayerNorm, LayerNormCache, Linear, LinearCache,
    Param,
};
use crate::nn::tensor::Tensor2D;
use crate::rng::Stream;

#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub state_dim: usize,
    pub time_dim: usize,
    pub context_dim: usize,
    pub hidden: usize,
    pub c_out: f64,
    pub time_embed: TimeEmbedding,
    pub lin1: Linear,
    pub ln1: LayerNorm,
    pub lin2: Linear,
    pub ln2: LayerNorm,
    pub lin3: Linear,
}

#[derive(Debug, Clone)]
pub struct DenoiserCache {
    batch: usize,
    time: TimeEmbedCache,
    lin1: LinearCache,
    ln1: LayerNormCache,
    act1: ActivationCache,
    lin2: LinearCache,
    ln2: LayerNormCache,
    act2: ActivationCache,
    lin3: LinearCache,
}

impl DenoiserParams {
    pub fn new(
        state_dim: usize,
        time_dim: usize,
        context_dim: usize,
        hidden: usize,
        c_out: f64,
        rng: &mut Stream,
    ) -> Result<Self> {
        if state_dim == 0 || hidden == 0 || context_dim == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        let input_dim = state_dim + time_dim + context_dim;
        Ok(DenoiserParams {
            state_dim,
            time_dim,
            context_dim,
            hidden,
            c_out,
            time_embed: TimeEmbedding::new(time_dim, rng)?,
            lin1: Linear::new(input_dim, hidden, rng),
            ln1: LayerNorm::new(hidden),
            lin2: Linear::new(hidden, hidden, rng),
            ln2: LayerNorm::new(hidden),
            lin3: Linear::new(hidden, state_dim, rng),
        })
    }

    /// Architecture defaults: 2-dim state, 32-dim time embedding, 64-dim
    /// context, width 256, output scale 0.1 (input dimension 98).
    pub fn with_defaults(rng: &mut Stream) -> Result<Self> {
        Self::new(2, 32, 64, 256, 0.1, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.time_dim + self.context_dim
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.time_embed.params_mut();
        out.push(&mut self.lin1.weight);
        out.push(&mut self.lin1.bias);
        out.push(&mut self.ln1.gain);
        out.push(&mut self.ln1.bias);
        out.push(&mut self.lin2.weight);
        out.push(&mut self.lin2.bias);
        out.push(&mut self.ln2.gain);
        out.push(&mut self.ln2.bias);
        out.push(&mut self.lin3.weight);
        out.push(&mut self.lin3.bias);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Batched noise prediction: `states` is `(batch, state_dim)`, `ts`
    /// holds one timestep per row, `contexts` is `(batch, context_dim)`.
    pub fn forward(
        &self,
        states: &Tensor2D,
        ts: &[usize],
        total_timesteps: usize,
        contexts: &Tensor2D,
    ) -> Result<(Tensor2D, DenoiserCache)> {
        let batch = states.rows;
        if states.cols != self.state_dim
            || contexts.rows != batch
            || contexts.cols != self.context_dim
            || ts.len() != batch
        {
            return Err(Error::Shape {
                op: "denoiser forward",
                expected: format!(
                    "states (b, {}), contexts (b, {}), {} timesteps",
                    self.state_dim, self.context_dim, batch
                ),
                got: format!(
                    "states {:?}, contexts {:?}, {} timesteps",
                    states.shape(),
                    contexts.shape(),
                    ts.len()
                ),
            });
        }
        let (t_emb, time_cache) = self.time_embed.forward(ts, total_timesteps)?;

        let mut z = Tensor2D::zeros(batch, self.input_dim());
        for r in 0..batch {
            let row = z.row_mut(r);
            row[..self.state_dim].copy_from_slice(states.row(r));
            row[self.state_dim..self.state_dim + self.time_dim].copy_from_slice(t_emb.row(r));
            row[self.state_dim + self.time_dim..].copy_from_slice(contexts.row(r));
        }

        let (a1, lin1) = self.lin1.forward(&z)?;
        let (n1, ln1) = self.ln1.forward(&a1)?;
        let (s1, act1) = silu_forward(&n1);
        let (a2, lin2) = self.lin2.forward(&s1)?;
        let (n2, ln2) = self.ln2.forward(&a2)?;
        let (s2, act2) = silu_forward(&n2);
        let (mut out, lin3) = self.lin3.forward(&s2)?;
        out.scale(self.c_out);
        out.check_finite("denoiser output")?;
        Ok((
            out,
            DenoiserCache {
                batch,
                time: time_cache,
                lin1,
                ln1,
                act1,
                lin2,
                ln2,
                act2,
                lin3,
            },
        ))
    }

    /// Single-instance convenience wrapper used by the sampler.
    pub fn predict_noise(
        &self,
        u_t: &[f64; 2],
        t: usize,
        total_timesteps: usize,
        h: &ContextEmbedding,
    ) -> Result<[f64; 2]> {
        let states = Tensor2D::from_vec(1, self.state_dim, u_t.to_vec())?;
        let contexts = Tensor2D::from_vec(1, self.context_dim, h.0.clone())?;
        let (out, _) = self.forward(&states, &[t], total_timesteps, &contexts)?;
        Ok([out.at(0, 0), out.at(0, 1)])
    }

    /// Backpropagate through the stack, accumulating parameter gradients.
    /// Returns `(grad_states, grad_contexts)`.
    pub fn backward(
        &mut self,
        grad_out: &Tensor2D,
        cache: &DenoiserCache,
    ) -> Result<(Tensor2D, Tensor2D)> {
        if grad_out.rows != cache.batch || grad_out.cols != self.state_dim {
            return Err(Error::Shape {
                op: "denoiser backward",
                expected: format!("({}, {})", cache.batch, self.state_dim),
                got: format!("{:?}", grad_out.shape()),
            });
        }
        let mut g = grad_out.clone();
        g.scale(self.c_out);
        let g = self.lin3.backward(&g, &cache.lin3)?;
        let g = silu_backward(&g, &cache.act2)?;
        let g = self.ln2.backward(&g, &cache.ln2)?;
        let g = self.lin2.backward(&g, &cache.lin2)?;
        let g = silu_backward(&g, &cache.act1)?;
        let g = self.ln1.backward(&g, &cache.ln1)?;
        let g = self.lin1.backward(&g, &cache.lin1)?;

        let mut grad_states = Tensor2D::zeros(cache.batch, self.state_dim);
        let mut grad_time = Tensor2D::zeros(cache.batch, self.time_dim);
        let mut grad_contexts = Tensor2D::zeros(cache.batch, self.context_dim);
        for r in 0..cache.batch {
            let row = g.row(r);
            grad_states
                .row_mut(r)
                .copy_from_slice(&row[..self.state_dim]);
            grad_time
                .row_mut(r)
                .copy_from_slice(&row[self.state_dim..self.state_dim + self.time_dim]);
            grad_contexts
                .row_mut(r)
                .copy_from_slice(&row[self.state_dim + self.time_dim..]);
        }
        self.time_embed.backward(&grad_time, &cache.time)?;
        Ok((grad_states, grad_contexts))
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.insert("denoiser.time.lin1.weight", &self.time_embed.lin1.weight.value);
        ckpt.insert("denoiser.time.lin1.bias", &self.time_embed.lin1.bias.value);
        ckpt.insert("denoiser.time.lin2.weight", &self.time_embed.lin2.weight.value);
        ckpt.insert("denoiser.time.lin2.bias", &self.time_embed.lin2.bias.value);
        ckpt.insert("denoiser.lin1.weight", &self.lin1.weight.value);
        ckpt.insert("denoiser.lin1.bias", &self.lin1.bias.value);
        ckpt.insert("denoiser.ln1.gain", &self.ln1.gain.value);
        ckpt.insert("denoiser.ln1.bias", &self.ln1.bias.value);
        ckpt.insert("denoiser.lin2.weight", &self.lin2.weight.value);
        ckpt.insert("denoiser.lin2.bias", &self.lin2.bias.value);
        ckpt.insert("denoiser.ln2.gain", &self.ln2.gain.value);
        ckpt.insert("denoiser.ln2.bias", &self.ln2.bias.value);
        ckpt.insert("denoiser.lin3.weight", &self.lin3.weight.value);
        ckpt.insert("denoiser.lin3.bias", &self.lin3.bias.value);
    }

    pub fn load_from(
        ckpt: &Checkpoint,
        state_dim: usize,
        time_dim: usize,
        context_dim: usize,
        hidden: usize,
        c_out: f64,
    ) -> Result<Self> {
        let mut rng = Stream::derive(0, "denoiser-load-placeholder");
        let mut params = Self::new(state_dim, time_dim, context_dim, hidden, c_out, &mut rng)?;
        params.time_embed.lin1.weight = Param::new(ckpt.get("denoiser.time.lin1.weight")?);
        params.time_embed.lin1.bias = Param::new(ckpt.get("denoiser.time.lin1.bias")?);
        params.time_embed.lin2.weight = Param::new(ckpt.get("denoiser.time.lin2.weight")?);
        params.time_embed.lin2.bias = Param::new(ckpt.get("denoiser.time.lin2.bias")?);
        params.lin1.weight = Param::new(ckpt.get("denoiser.lin1.weight")?);
        params.lin1.bias = Param::new(ckpt.get("denoiser.lin1.bias")?);
        params.ln1.gain = Param::new(ckpt.get("denoiser.ln1.gain")?);
        params.ln1.bias = Param::new(ckpt.get("denoiser.ln1.bias")?);
        params.lin2.weight = Param::new(ckpt.get("denoiser.lin2.weight")?);
        params.lin2.bias = Param::new(ckpt.get("denoiser.lin2.bias")?);
        params.ln2.gain = Param::new(ckpt.get("denoiser.ln2.gain")?);
        params.ln2.bias = Param::new(ckpt.get("denoiser.ln2.bias")?);
        params.lin3.weight = Param::new(ckpt.get("denoiser.lin3.weight")?);
        params.lin3.bias = Param::new(ckpt.get("denoiser.lin3.bias")?);
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(dim: usize, seed: u64) -> ContextEmbedding {
        let mut rng = Stream::derive(seed, "denoiser-ctx");
        ContextEmbedding((0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
    }

    #[test]
    fn default_input_dim_is_98() {
        let mut rng = Stream::derive(41, "den-dim");
        let den = DenoiserParams::with_defaults(&mut rng).unwrap();
        assert_eq!(den.input_dim(), 98);
    }

    #[test]
    fn all_zero_params_predict_zero_noise() {
        let mut rng = Stream::derive(42, "den-zero");
        let mut den = DenoiserParams::with_defaults(&mut rng).unwrap();
        for p in den.params_mut() {
            p.value.fill(0.0);
        }
        // Layer norms still carry zero gain here, so the stack is exactly 0.
        let out = den
            .predict_noise(&[0.7, -0.3], 400, 1000, &ctx(64, 1))
            .unwrap();
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn output_is_scaled_prediction() {
        let mut rng = Stream::derive(43, "den-scale");
        let den = DenoiserParams::with_defaults(&mut rng).unwrap();
        let mut unscaled = den.clone();
        unscaled.c_out = 1.0;
        let h = ctx(64, 2);
        let a = den.predict_noise(&[0.2, 0.4], 250, 1000, &h).unwrap();
        let b = unscaled.predict_noise(&[0.2, 0.4], 250, 1000, &h).unwrap();
        for i in 0..2 {
            assert!((a[i] - 0.1 * b[i]).abs() < 1e-15);
            assert!(a[i].abs() <= 0.1 * b[i].abs() + 1e-15);
        }
    }

    /// Straight-line re-coding of the concatenation and MLP stack, kept free
    /// of the layer structs on purpose.
    fn reference_forward(den: &DenoiserParams, u: &[f64; 2], t: usize, total: usize, h: &[f64]) -> [f64; 2] {
        let half = den.time_dim / 2;
        let mut raw = vec![0.0; den.time_dim];
        for j in 0..half {
            let omega = 10_000f64.powf(-2.0 * j as f64 / den.time_dim as f64);
            let phase = (t as f64 / total as f64) * omega;
            raw[j] = phase.sin();
            raw[half + j] = phase.cos();
        }
        let matvec = |w: &Tensor2D, b: &Tensor2D, x: &[f64]| -> Vec<f64> {
            (0..w.cols)
                .map(|c| {
                    let mut acc = b.at(0, c);
                    for (r, xv) in x.iter().enumerate() {
                        acc += xv * w.at(r, c);
                    }
                    acc
                })
                .collect()
        };
        let silu = |v: Vec<f64>| -> Vec<f64> {
            v.into_iter().map(|x| x / (1.0 + (-x).exp())).collect()
        };
        let ln = |v: Vec<f64>, gain: &Tensor2D, bias: &Tensor2D| -> Vec<f64> {
            let n = v.len() as f64;
            let mu = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            v.iter()
                .enumerate()
                .map(|(i, x)| (x - mu) * inv * gain.at(0, i) + bias.at(0, i))
                .collect()
        };

        let te1 = matvec(&den.time_embed.lin1.weight.value, &den.time_embed.lin1.bias.value, &raw);
        let temb = matvec(
            &den.time_embed.lin2.weight.value,
            &den.time_embed.lin2.bias.value,
            &silu(te1),
        );
        let mut z = Vec::with_capacity(den.input_dim());
        z.extend_from_slice(u);
        z.extend_from_slice(&temb);
        z.extend_from_slice(h);
        let a1 = matvec(&den.lin1.weight.value, &den.lin1.bias.value, &z);
        let s1 = silu(ln(a1, &den.ln1.gain.value, &den.ln1.bias.value));
        let a2 = matvec(&den.lin2.weight.value, &den.lin2.bias.value, &s1);
        let s2 = silu(ln(a2, &den.ln2.gain.value, &den.ln2.bias.value));
        let out = matvec(&den.lin3.weight.value, &den.lin3.bias.value, &s2);
        [out[0] * den.c_out, out[1] * den.c_out]
    }

    #[test]
    fn forward_matches_straight_line_reference() {
        let mut rng = Stream::derive(44, "den-ref");
        let den = DenoiserParams::with_defaults(&mut rng).unwrap();
        let h = ctx(64, 3);
        for (u, t) in [([0.3, -0.9], 17usize), ([1.4, 0.2], 512), ([0.0, 0.0], 1000)] {
            let got = den.predict_noise(&u, t, 1000, &h).unwrap();
            let want = reference_forward(&den, &u, t, 1000, &h.0);
            assert!((got[0] - want[0]).abs() <= 1e-12, "{got:?} vs {want:?}");
            assert!((got[1] - want[1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_small_model() {
        let mut rng = Stream::derive(45, "den-fd");
        let mut den = DenoiserParams::new(2, 4, 3, 6, 0.1, &mut rng).unwrap();
        let states = Tensor2D::from_vec(2, 2, vec![0.3, -0.5, 1.1, 0.2]).unwrap();
        let contexts =
            Tensor2D::from_vec(2, 3, vec![0.4, -0.2, 0.8, -0.6, 0.1, 0.9]).unwrap();
        let ts = [100usize, 700];
        let w = Tensor2D::from_vec(2, 2, vec![0.7, -0.4, 0.3, 1.2]).unwrap();

        let objective = |d: &DenoiserParams, s: &Tensor2D, c: &Tensor2D| {
            let (y, _) = d.forward(s, &ts, 1000, c).unwrap();
            y.data.iter().zip(w.data.iter()).map(|(a, b)| a * b).sum::<f64>()
        };

        let (_, cache) = den.forward(&states, &ts, 1000, &contexts).unwrap();
        let (grad_states, grad_contexts) = den.backward(&w, &cache).unwrap();

        for idx in 0..states.data.len() {
            let base = states.data[idx];
            let h = 1e-5 * base.abs().max(1.0);
            let mut sp = states.clone();
            sp.data[idx] = base + h;
            let up = objective(&den, &sp, &contexts);
            sp.data[idx] = base - h;
            let down = objective(&den, &sp, &contexts);
            let num = (up - down) / (2.0 * h);
            let ana = grad_states.data[idx];
            assert!(
                (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6) < 1e-5,
                "state {idx}: {ana} vs {num}"
            );
        }
        for idx in 0..contexts.data.len() {
            let base = contexts.data[idx];
            let h = 1e-5 * base.abs().max(1.0);
            let mut cp = contexts.clone();
            cp.data[idx] = base + h;
            let up = objective(&den, &states, &cp);
            cp.data[idx] = base - h;
            let down = objective(&den, &states, &cp);
            let num = (up - down) / (2.0 * h);
            let ana = grad_contexts.data[idx];
            assert!(
                (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6) < 1e-5,
                "context {idx}: {ana} vs {num}"
            );
        }
        // Spot-check a parameter tensor from the middle of the stack.
        for idx in (0..den.lin2.weight.value.data.len()).step_by(3) {
            let base = den.lin2.weight.value.data[idx];
            let h = 1e-5 * base.abs().max(1.0);
            let mut d2 = den.clone();
            d2.lin2.weight.value.data[idx] = base + h;
            let up = objective(&d2, &states, &contexts);
            d2.lin2.weight.value.data[idx] = base - h;
            let down = objective(&d2, &states, &contexts);
            let num = (up - down) / (2.0 * h);
            let ana = den.lin2.weight.grad.data[idx];
            assert!(
                (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6) < 1e-5,
                "lin2.weight[{idx}]: {ana} vs {num}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = Stream::derive(46, "den-ckpt");
        let den = DenoiserParams::with_defaults(&mut rng).unwrap();
        let mut ckpt = Checkpoint::new("diffusion", 7);
        den.save_into(&mut ckpt);
        let loaded = DenoiserParams::load_from(&ckpt, 2, 32, 64, 256, 0.1).unwrap();
        assert_eq!(loaded.lin1.weight.value, den.lin1.weight.value);
        assert_eq!(loaded.lin3.bias.value, den.lin3.bias.value);
        assert_eq!(loaded.time_embed.lin2.weight.value, den.time_embed.lin2.weight.value);
    }
}
