//! GATv2 strategic encoder: maps the two-node directed negotiation graph
//! (complete digraph plus self-loops) to a fixed context embedding.
//!
//! Per head, scores follow the GATv2 ordering: the shared weight is applied
//! to the concatenated feature pair before the LeakyReLU, then the attention
//! vector: `e_ij = a . leaky_relu(W [x_i || x_j])`. Node aggregation uses the
//! right block of `W` (the part that multiplies `x_j`), softmax-normalized
//! attention, and an ELU activation. Head outputs are concatenated, linearly
//! projected, layer-normalized, and mean-pooled over the two nodes.
//!
//! The embedding is computed once per instance and reused across all
//! diffusion steps.

use crate::domain::{NegotiationInstance, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{Param, LayerNorm, LayerNormCache, Linear, LinearCache, LEAKY_RELU_SLOPE};
use crate::nn::tensor::Tensor2D;
use crate::rng::Stream;

pub const NODES: usize = 2;

/// Pooled context embedding; permutation-invariant in the agent order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding(pub Vec<f64>);

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub feat_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Per head: `(head_dim, 2 * feat_dim)` score/value weight.
    pub head_weight: Vec<Param>,
    /// Per head: `(1, head_dim)` attention vector.
    pub head_attn: Vec<Param>,
    /// Post-concat projection `(heads * head_dim) -> head_dim`.
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl EncoderParams {
    pub fn new(heads: usize, head_dim: usize, feat_dim: usize, rng: &mut Stream) -> Result<Self> {
        if heads == 0 || head_dim == 0 || feat_dim == 0 {
            return Err(Error::Config(
                "encoder dimensions must be positive".to_string(),
            ));
        }
        let head_weight = (0..heads)
            .map(|_| Param::new(Tensor2D::init_uniform(head_dim, 2 * feat_dim, 2 * feat_dim, rng)))
            .collect();
        let head_attn = (0..heads)
            .map(|_| Param::new(Tensor2D::init_uniform(1, head_dim, head_dim, rng)))
            .collect();
        Ok(EncoderParams {
            feat_dim,
            heads,
            head_dim,
            head_weight,
            head_attn,
            proj: Linear::new(heads * head_dim, head_dim, rng),
            norm: LayerNorm::new(head_dim),
        })
    }

    /// Architecture defaults: 4 heads, 64-dim embedding, 3 features.
    pub fn with_defaults(rng: &mut Stream) -> Result<Self> {
        Self::new(4, 64, FEATURE_DIM, rng)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for p in &mut self.head_weight {
            out.push(p);
        }
        for p in &mut self.head_attn {
            out.push(p);
        }
        out.push(&mut self.proj.weight);
        out.push(&mut self.proj.bias);
        out.push(&mut self.norm.gain);
        out.push(&mut self.norm.bias);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        for (m, p) in self.head_weight.iter().enumerate() {
            ckpt.insert(&format!("encoder.head{m}.weight"), &p.value);
        }
        for (m, p) in self.head_attn.iter().enumerate() {
            ckpt.insert(&format!("encoder.head{m}.attn"), &p.value);
        }
        ckpt.insert("encoder.proj.weight", &self.proj.weight.value);
        ckpt.insert("encoder.proj.bias", &self.proj.bias.value);
        ckpt.insert("encoder.norm.gain", &self.norm.gain.value);
        ckpt.insert("encoder.norm.bias", &self.norm.bias.value);
        }

    pub fn load_from(ckpt: &Checkpoint, heads: usize, head_dim: usize, feat_dim: usize) -> Result<Self> {
        let mut rng = Stream::derive(0, "encoder-load-placeholder");
        let mut params = Self::new(heads, head_dim, feat_dim, &mut rng)?;
        for m in 0..heads {
            params.head_weight[m] = Param::new(ckpt.get(&format!("encoder.head{m}.weight"))?);
            params.head_attn[m] = Param::new(ckpt.get(&format!("encoder.head{m}.attn"))?);
        }
        params.proj.weight = Param::new(ckpt.get("encoder.proj.weight")?);
        params.proj.bias = Param::new(ckpt.get("encoder.proj.bias")?);
        params.norm.gain = Param::new(ckpt.get("encoder.norm.gain")?);
        params.norm.bias = Param::new(ckpt.get("encoder.norm.bias")?);
        Ok(params)
    }
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

#[inline]
fn elu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[derive(Debug, Clone)]
struct HeadCache {
    /// Pre-activation scores `W [x_i || x_j]`, indexed `[i][j]`.
    z: [[Vec<f64>; NODES]; NODES],
    /// Attention weights after the row softmax, indexed `[i][j]`.
    alpha: [[f64; NODES]; NODES],
    /// Value vectors `W_r x_j`.
    value: [Vec<f64>; NODES],
    /// Pre-ELU aggregate per node.
    agg: [Vec<f64>; NODES],
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    features: [[f64; FEATURE_DIM]; NODES],
    heads: Vec<HeadCache>,
    proj: LinearCache,
    norm: LayerNormCache,
}

/// Encode one instance. Returns the pooled embedding and the cache for
/// [`encode_backward`].
pub fn encode(
    instance: &NegotiationInstance,
    params: &EncoderParams,
) -> Result<(ContextEmbedding, EncodeCache)> {
    if params.feat_dim != FEATURE_DIM {
        return Err(Error::Shape {
            op: "encode",
            expected: format!("feature dim {FEATURE_DIM}"),
            got: format!("{}", params.feat_dim),
        });
    }
    let x = instance.features();
    let k = params.feat_dim;
    let dh = params.head_dim;

    let mut head_caches = Vec::with_capacity(params.heads);
    // Concatenated per-node head outputs.
    let mut concat = Tensor2D::zeros(NODES, params.heads * dh);

    for (m, (weight, attn)) in params
        .head_weight
        .iter()
        .zip(params.head_attn.iter())
        .enumerate()
    {
        let w = &weight.value;
        let a = &attn.value;

        // Scores over the complete digraph with self-loops.
        let mut z: [[Vec<f64>; NODES]; NODES] = Default::default();
        let mut scores = [[0.0; NODES]; NODES];
        for i in 0..NODES {
            for j in 0..NODES {
                let mut zij = vec![0.0; dh];
                for row in 0..dh {
                    let mut acc = 0.0;
                    for c in 0..k {
                        acc += w.at(row, c) * x[i][c];
                        acc += w.at(row, k + c) * x[j][c];
                    }
                    zij[row] = acc;
                }
                let mut e = 0.0;
                for row in 0..dh {
                    let l = if zij[row] < 0.0 {
                        LEAKY_RELU_SLOPE * zij[row]
                    } else {
                        zij[row]
                    };
                    e += a.at(0, row) * l;
                }
                scores[i][j] = e;
                z[i][j] = zij;
            }
        }

        // Neighborhood softmax per target node.
        let mut alpha = [[0.0; NODES]; NODES];
        for i in 0..NODES {
            let max = scores[i][0].max(scores[i][1]);
            let e0 = (scores[i][0] - max).exp();
            let e1 = (scores[i][1] - max).exp();
            let sum = e0 + e1;
            alpha[i][0] = e0 / sum;
            alpha[i][1] = e1 / sum;
        }

        // Values from the right block of W, aggregation, ELU.
        let mut value: [Vec<f64>; NODES] = Default::default();
        for (j, slot) in value.iter_mut().enumerate() {
            let mut vj = vec![0.0; dh];
            for (row, out) in vj.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..k {
                    acc += w.at(row, k + c) * x[j][c];
                }
                *out = acc;
            }
            *slot = vj;
        }
        let mut agg: [Vec<f64>; NODES] = Default::default();
        for i in 0..NODES {
            let mut acc = vec![0.0; dh];
            for j in 0..NODES {
                for row in 0..dh {
                    acc[row] += alpha[i][j] * value[j][row];
                }
            }
            for row in 0..dh {
                *concat.at_mut(i, m * dh + row) = elu(acc[row]);
            }
            agg[i] = acc;
        }

        head_caches.push(HeadCache { z, alpha, value, agg });
    }

    let (projected, proj_cache) = params.proj.forward(&concat)?;
    let (normed, norm_cache) = params.norm.forward(&projected)?;

    // Mean pool over nodes in fixed index order.
    let mut h = vec![0.0; dh];
    for (c, out) in h.iter_mut().enumerate() {
        *out = (normed.at(0, c) + normed.at(1, c)) / NODES as f64;
    }

    Ok((
        ContextEmbedding(h),
        EncodeCache {
            features: x,
            heads: head_caches,
            proj: proj_cache,
            norm: norm_cache,
        },
    ))
}

/// Backpropagate `grad_h` through the encoder, accumulating parameter
/// gradients in place. Returns the gradient with respect to the node
/// features (no consumer trains them; returned for checks and symmetry
/// tests).
pub fn encode_backward(
    params: &mut EncoderParams,
    grad_h: &[f64],
    cache: &EncodeCache,
) -> Result<[[f64; FEATURE_DIM]; NODES]> {
    let dh = params.head_dim;
    let k = params.feat_dim;
    if grad_h.len() != dh {
        return Err(Error::Shape {
            op: "encode_backward",
            expected: format!("grad of dim {dh}"),
            got: format!("{}", grad_h.len()),
        });
    }
    if cache.heads.len() != params.heads {
        return Err(Error::Shape {
            op: "encode_backward",
            expected: format!("cache with {} heads", params.heads),
            got: format!("{}", cache.heads.len()),
        });
    }

    // Mean pool: each node row receives grad_h / 2.
    let mut grad_norm = Tensor2D::zeros(NODES, dh);
    for i in 0..NODES {
        for c in 0..dh {
            *grad_norm.at_mut(i, c) = grad_h[c] / NODES as f64;
        }
    }
    let grad_proj = params.norm.backward(&grad_norm, &cache.norm)?;
    let grad_concat = params.proj.backward(&grad_proj, &cache.proj)?;

    let x = &cache.features;
    let mut grad_x = [[0.0; FEATURE_DIM]; NODES];

    for (m, head) in cache.heads.iter().enumerate() {
        let w = &params.head_weight[m].value;
        let a = &params.head_attn[m].value;
        let mut grad_w = Tensor2D::zeros(dh, 2 * k);
        let mut grad_a = vec![0.0; dh];

        // Through ELU into the aggregate.
        let mut grad_agg: [Vec<f64>; NODES] = Default::default();
        for i in 0..NODES {
            let mut g = vec![0.0; dh];
            for row in 0..dh {
                g[row] =
                    grad_concat.at(i, m * dh + row) * elu_derivative(head.agg[i][row]);
            }
            grad_agg[i] = g;
        }

        // Aggregate = sum_j alpha_ij * value_j.
        let mut grad_alpha = [[0.0; NODES]; NODES];
        let mut grad_value: [Vec<f64>; NODES] = [vec![0.0; dh], vec![0.0; dh]];
        for i in 0..NODES {
            for j in 0..NODES {
                let mut dot = 0.0;
                for row in 0..dh {
                    dot += grad_agg[i][row] * head.value[j][row];
                    grad_value[j][row] += head.alpha[i][j] * grad_agg[i][row];
                }
                grad_alpha[i][j] = dot;
            }
        }

        // Softmax rows over the neighborhood.
        let mut grad_score = [[0.0; NODES]; NODES];
        for i in 0..NODES {
            let weighted: f64 = (0..NODES)
                .map(|j| grad_alpha[i][j] * head.alpha[i][j])
                .sum();
            for j in 0..NODES {
                grad_score[i][j] = head.alpha[i][j] * (grad_alpha[i][j] - weighted);
            }
        }

        // Scores e_ij = a . leaky_relu(z_ij).
        for i in 0..NODES {
            for j in 0..NODES {
                let zij = &head.z[i][j];
                let ge = grad_score[i][j];
                for row in 0..dh {
                    let l = if zij[row] < 0.0 {
                        LEAKY_RELU_SLOPE * zij[row]
                    } else {
                        zij[row]
                    };
                    grad_a[row] += ge * l;
                    let slope = if zij[row] < 0.0 { LEAKY_RELU_SLOPE } else { 1.0 };
                    let gz = ge * a.at(0, row) * slope;
                    // z_ij = W [x_i || x_j]
                    for c in 0..k {
                        *grad_w.at_mut(row, c) += gz * x[i][c];
                        *grad_w.at_mut(row, k + c) += gz * x[j][c];
                        grad_x[i][c] += gz * w.at(row, c);
                        grad_x[j][c] += gz * w.at(row, k + c);
                    }
                }
            }
        }

        // Values v_j = W_r x_j (right block of W).
        for j in 0..NODES {
            for row in 0..dh {
                let gv = grad_value[j][row];
                for c in 0..k {
                    *grad_w.at_mut(row, k + c) += gv * x[j][c];
                    grad_x[j][c] += gv * w.at(row, k + c);
                }
            }
        }

        params.head_weight[m].grad.add_assign(&grad_w)?;
        for row in 0..dh {
            *params.head_attn[m].grad.at_mut(0, row) += grad_a[row];
        }
    }

    Ok(grad_x)
}
