//! Forward/backward passes for the closed layer set.
//!
//! Every forward returns the activation plus an explicit cache; the
//! matching backward consumes the cache, accumulates parameter gradients
//! in place, and returns the gradient with respect to the input. Caches
//! are validated against the incoming gradient shape so a cache from a
//! different call errors instead of corrupting gradients.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor2D;
use crate::rng::Stream;

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// One learnable array with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor2D,
    pub grad: Tensor2D,
}

impl Param {
    pub fn new(value: Tensor2D) -> Self {
        let grad = Tensor2D::zeros(value.rows, value.cols);
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map `y = x W + b` with `W: (fan_in, fan_out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    input: Tensor2D,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut Stream) -> Self {
        Linear {
            weight: Param::new(Tensor2D::init_uniform(fan_in, fan_out, fan_in, rng)),
            bias: Param::new(Tensor2D::zeros(1, fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.rows
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.cols
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<(Tensor2D, LinearCache)> {
        let mut y = x.matmul(&self.weight.value)?;
        for r in 0..y.rows {
            for c in 0..y.cols {
                *y.at_mut(r, c) += self.bias.value.at(0, c);
            }
        }
        y.check_finite("linear forward")?;
        Ok((y, LinearCache { input: x.clone() }))
    }

    pub fn backward(&mut self, grad_out: &Tensor2D, cache: &LinearCache) -> Result<Tensor2D> {
        if grad_out.rows != cache.input.rows || grad_out.cols != self.fan_out() {
            return Err(Error::Shape {
                op: "linear backward",
                expected: format!("({}, {})", cache.input.rows, self.fan_out()),
                got: format!("{:?}", grad_out.shape()),
            });
        }
        let grad_w = cache.input.matmul_tn(grad_out)?;
        self.weight.grad.add_assign(&grad_w)?;
        for r in 0..grad_out.rows {
            for c in 0..grad_out.cols {
                *self.bias.grad.at_mut(0, c) += grad_out.at(r, c);
            }
        }
        grad_out.matmul_nt(&self.weight.value)
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

/// Row-wise normalization to zero mean / unit variance with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Tensor2D,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        let mut gain = Tensor2D::zeros(1, dim);
        gain.fill(1.0);
        LayerNorm {
            gain: Param::new(gain),
            bias: Param::new(Tensor2D::zeros(1, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.value.cols
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<(Tensor2D, LayerNormCache)> {
        if x.cols != self.dim() {
            return Err(Error::Shape {
                op: "layernorm forward",
                expected: format!("{} cols", self.dim()),
                got: format!("{}", x.cols),
            });
        }
        let n = x.cols as f64;
        let mut normalized = Tensor2D::zeros(x.rows, x.cols);
        let mut out = Tensor2D::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..x.cols {
                let z = (row[c] - mu) * inv;
                *normalized.at_mut(r, c) = z;
                *out.at_mut(r, c) = z * self.gain.value.at(0, c) + self.bias.value.at(0, c);
            }
        }
        out.check_finite("layernorm forward")?;
        Ok((out, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward(&mut self, grad_out: &Tensor2D, cache: &LayerNormCache) -> Result<Tensor2D> {
        if grad_out.shape() != cache.normalized.shape() || grad_out.cols != self.dim() {
            return Err(Error::Shape {
                op: "layernorm backward",
                expected: format!("{:?}", cache.normalized.shape()),
                got: format!("{:?}", grad_out.shape()),
            });
        }
        let n = grad_out.cols as f64;
        let mut grad_in = Tensor2D::zeros(grad_out.rows, grad_out.cols);
        for r in 0..grad_out.rows {
            let inv = cache.inv_std[r];
            let zr = cache.normalized.row(r);
            let gr = grad_out.row(r);
            // Gradient through the affine part.
            let mut gz = vec![0.0; grad_out.cols];
            for c in 0..grad_out.cols {
                gz[c] = gr[c] * self.gain.value.at(0, c);
                *self.gain.grad.at_mut(0, c) += gr[c] * zr[c];
                *self.bias.grad.at_mut(0, c) += gr[c];
            }
            let mean_gz = gz.iter().sum::<f64>() / n;
            let mean_gz_z = gz.iter().zip(zr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
            for c in 0..grad_out.cols {
                *grad_in.at_mut(r, c) = inv * (gz[c] - mean_gz - zr[c] * mean_gz_z);
            }
        }
        Ok(grad_in)
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct ActivationCache {
    input: Tensor2D,
}

pub fn silu_forward(x: &Tensor2D) -> (Tensor2D, ActivationCache) {
    let mut y = x.clone();
    for v in &mut y.data {
        *v *= sigmoid(*v);
    }
    (y, ActivationCache { input: x.clone() })
}

pub fn silu_backward(grad_out: &Tensor2D, cache: &ActivationCache) -> Result<Tensor2D> {
    if grad_out.shape() != cache.input.shape() {
        return Err(Error::Shape {
            op: "silu backward",
            expected: format!("{:?}", cache.input.shape()),
            got: format!("{:?}", grad_out.shape()),
        });
    }
    let mut grad_in = grad_out.clone();
    for (g, &x) in grad_in.data.iter_mut().zip(cache.input.data.iter()) {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    }
    Ok(grad_in)
}

pub fn leaky_relu_forward(x: &Tensor2D, slope: f64) -> (Tensor2D, ActivationCache) {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    (y, ActivationCache { input: x.clone() })
}

pub fn leaky_relu_backward(
    grad_out: &Tensor2D,
    cache: &ActivationCache,
    slope: f64,
) -> Result<Tensor2D> {
    if grad_out.shape() != cache.input.shape() {
        return Err(Error::Shape {
            op: "leaky_relu backward",
            expected: format!("{:?}", cache.input.shape()),
            got: format!("{:?}", grad_out.shape()),
        });
    }
    let mut grad_in = grad_out.clone();
    for (g, &x) in grad_in.data.iter_mut().zip(cache.input.data.iter()) {
        if x < 0.0 {
            *g *= slope;
        }
    }
    Ok(grad_in)
}

#[derive(Debug, Clone)]
pub struct SoftmaxCache {
    output: Tensor2D,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows_forward(x: &Tensor2D) -> (Tensor2D, SoftmaxCache) {
    let mut y = x.clone();
    for r in 0..y.rows {
        let row = y.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let cache = SoftmaxCache { output: y.clone() };
    (y, cache)
}

pub fn softmax_rows_backward(grad_out: &Tensor2D, cache: &SoftmaxCache) -> Result<Tensor2D> {
    if grad_out.shape() != cache.output.shape() {
        return Err(Error::Shape {
            op: "softmax backward",
            expected: format!("{:?}", cache.output.shape()),
            got: format!("{:?}", grad_out.shape()),
        });
    }
    let mut grad_in = Tensor2D::zeros(grad_out.rows, grad_out.cols);
    for r in 0..grad_out.rows {
        let yr = cache.output.row(r);
        let gr = grad_out.row(r);
        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        for c in 0..grad_out.cols {
            *grad_in.at_mut(r, c) = yr[c] * (gr[c] - dot);
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut Stream) -> Tensor2D {
        let data = (0..rows * cols).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        Tensor2D::from_vec(rows, cols, data).unwrap()
    }

    /// Relative error with an absolute floor for near-zero pairs.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central finite differences of `f` at `x[idx]`, relative step 1e-5.
    fn central_diff(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    /// Scalar objective used by all gradient checks: weighted sum of outputs,
    /// so the output gradient is the (fixed) weight tensor.
    fn weighted_sum(y: &Tensor2D, w: &Tensor2D) -> f64 {
        y.data.iter().zip(w.data.iter()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn silu_at_zero_is_zero() {
        let x = Tensor2D::from_vec(1, 1, vec![0.0]).unwrap();
        let (y, _) = silu_forward(&x);
        assert_eq!(y.data[0], 0.0);
    }

    #[test]
    fn silu_gradient_saturates_at_large_negative_input() {
        let x = Tensor2D::from_vec(1, 1, vec![-40.0]).unwrap();
        let (_, cache) = silu_forward(&x);
        let g = Tensor2D::from_vec(1, 1, vec![1.0]).unwrap();
        let grad = silu_backward(&g, &cache).unwrap();
        assert!(grad.data[0].abs() < 1e-12, "grad {}", grad.data[0]);
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let x = Tensor2D::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let (y, _) = softmax_rows_forward(&x);
        assert_eq!(y.data, vec![0.5, 0.5]);
    }

    #[test]
    fn layernorm_of_constant_row_is_the_bias() {
        let mut ln = LayerNorm::new(4);
        ln.bias.value = Tensor2D::from_vec(1, 4, vec![0.3, -0.1, 0.7, 0.0]).unwrap();
        let x = Tensor2D::from_vec(1, 4, vec![0.1, 0.1, 0.1, 0.1]).unwrap();
        let (y, _) = ln.forward(&x).unwrap();
        for c in 0..4 {
            assert!((y.at(0, c) - ln.bias.value.at(0, c)).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_identity_passes_gradient_through() {
        let mut rng = Stream::derive(1, "lin-id");
        let mut lin = Linear::new(3, 3, &mut rng);
        lin.weight.value = Tensor2D::from_vec(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        lin.bias.value.fill(0.0);
        let x = rand_tensor(2, 3, &mut rng);
        let (_, cache) = lin.forward(&x).unwrap();
        let g = rand_tensor(2, 3, &mut rng);
        let grad_in = lin.backward(&g, &cache).unwrap();
        assert_eq!(grad_in, g);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = Stream::derive(2, "lin-fd");
        for trial in 0..100 {
            let mut lin = Linear::new(4, 8, &mut rng);
            let x = rand_tensor(3, 4, &mut rng);
            let w = rand_tensor(3, 8, &mut rng);
            let (_, cache) = lin.forward(&x).unwrap();
            let grad_in = lin.backward(&w, &cache).unwrap();

            // Input gradient.
            for idx in 0..x.data.len() {
                let mut f = |v: f64| {
                    let mut xp = x.clone();
                    xp.data[idx] = v;
                    weighted_sum(&lin.forward(&xp).unwrap().0, &w)
                };
                let num = central_diff(&mut f, x.data[idx]);
                assert!(
                    rel_err(grad_in.data[idx], num) < 1e-5,
                    "trial {trial} input idx {idx}: {} vs {num}",
                    grad_in.data[idx]
                );
            }
            // Weight gradient (subset).
            for idx in (0..lin.weight.value.data.len()).step_by(7) {
                let base = lin.weight.value.data[idx];
                let mut f = |v: f64| {
                    let mut l2 = lin.clone();
                    l2.weight.value.data[idx] = v;
                    weighted_sum(&l2.forward(&x).unwrap().0, &w)
                };
                let num = central_diff(&mut f, base);
                assert!(rel_err(lin.weight.grad.data[idx], num) < 1e-5);
            }
            // Bias gradient.
            for idx in 0..lin.bias.value.data.len() {
                let base = lin.bias.value.data[idx];
                let mut f = |v: f64| {
                    let mut l2 = lin.clone();
                    l2.bias.value.data[idx] = v;
                    weighted_sum(&l2.forward(&x).unwrap().0, &w)
                };
                let num = central_diff(&mut f, base);
                assert!(rel_err(lin.bias.grad.data[idx], num) < 1e-5);
            }
        }
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut rng = Stream::derive(3, "ln-fd");
        for _ in 0..100 {
            let mut ln = LayerNorm::new(6);
            ln.gain.value = rand_tensor(1, 6, &mut rng);
            ln.bias.value = rand_tensor(1, 6, &mut rng);
            let x = rand_tensor(2, 6, &mut rng);
            let w = rand_tensor(2, 6, &mut rng);
            let (_, cache) = ln.forward(&x).unwrap();
            let grad_in = ln.backward(&w, &cache).unwrap();

            for idx in 0..x.data.len() {
                let mut f = |v: f64| {
                    let mut xp = x.clone();
                    xp.data[idx] = v;
                    weighted_sum(&ln.forward(&xp).unwrap().0, &w)
                };
                let num = central_diff(&mut f, x.data[idx]);
                assert!(rel_err(grad_in.data[idx], num) < 1e-5);
            }
            for idx in 0..6 {
                let mut f = |v: f64| {
                    let mut l2 = ln.clone();
                    l2.gain.value.data[idx] = v;
                    weighted_sum(&l2.forward(&x).unwrap().0, &w)
                };
                let num = central_diff(&mut f, ln.gain.value.data[idx]);
                assert!(rel_err(ln.gain.grad.data[idx], num) < 1e-5);
            }
        }
    }

    #[test]
    fn silu_gradients_match_finite_differences() {
        let mut rng = Stream::derive(4, "silu-fd");
        for _ in 0..100 {
            let x = rand_tensor(2, 5, &mut rng);
            let w = rand_tensor(2, 5, &mut rng);
            let (_, cache) = silu_forward(&x);
            let grad_in = silu_backward(&w, &cache).unwrap();
            for idx in 0..x.data.len() {
                let mut f = |v: f64| {
                    let mut xp = x.clone();
                    xp.data[idx] = v;
                    weighted_sum(&silu_forward(&xp).0, &w)
                };
                let num = central_diff(&mut f, x.data[idx]);
                assert!(rel_err(grad_in.data[idx], num) < 1e-5);
            }
        }
    }

    #[test]
    fn leaky_relu_gradients_match_finite_differences() {
        let mut rng = Stream::derive(5, "lrelu-fd");
        for _ in 0..100 {
            let x = rand_tensor(2, 5, &mut rng);
            let w = rand_tensor(2, 5, &mut rng);
            let (_, cache) = leaky_relu_forward(&x, LEAKY_RELU_SLOPE);
            let grad_in = leaky_relu_backward(&w, &cache, LEAKY_RELU_SLOPE).unwrap();
            for idx in 0..x.data.len() {
                if x.data[idx].abs() < 1e-4 {
                    continue; // kink
                }
                let mut f = |v: f64| {
                    let mut xp = x.clone();
                    xp.data[idx] = v;
                    weighted_sum(&leaky_relu_forward(&xp, LEAKY_RELU_SLOPE).0, &w)
                };
                let num = central_diff(&mut f, x.data[idx]);
                assert!(rel_err(grad_in.data[idx], num) < 1e-5);
            }
        }
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = Stream::derive(6, "sm-fd");
        for _ in 0..100 {
            let x = rand_tensor(2, 4, &mut rng);
            let w = rand_tensor(2, 4, &mut rng);
            let (_, cache) = softmax_rows_forward(&x);
            let grad_in = softmax_rows_backward(&w, &cache).unwrap();
            for idx in 0..x.data.len() {
                let mut f = |v: f64| {
                    let mut xp = x.clone();
                    xp.data[idx] = v;
                    weighted_sum(&softmax_rows_forward(&xp).0, &w)
                };
                let num = central_diff(&mut f, x.data[idx]);
                assert!(rel_err(grad_in.data[idx], num) < 1e-5);
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = Stream::derive(7, "stale");
        let mut lin = Linear::new(4, 8, &mut rng);
        let x = rand_tensor(3, 4, &mut rng);
        let (_, cache) = lin.forward(&x).unwrap();
        let wrong = rand_tensor(2, 8, &mut rng);
        assert!(lin.backward(&wrong, &cache).is_err());
    }
}
