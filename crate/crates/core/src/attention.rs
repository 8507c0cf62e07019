//! Masked multi-head self-attention followed by layer norm and a ReLU
//! feed-forward network.
//!
//! ```text
//! Q = y W_Q + b_Q,  K = y W_K + b_K,  V = y W_V + b_V      (split into h heads)
//! alpha = masked_softmax(Q K^T / sqrt(d_k), g(H))
//! y_a   = LayerNorm((alpha V) W_O + b_O)
//! out   = ReLU(y_a W_1 + b_1) W_2 + b_2
//! ```
//!
//! With `residual` on, the input is added before the norm and `y_a` is added
//! to the feed-forward output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, TensorError, Var};
use crate::gf2::BinaryMatrix;
use crate::model::ModelError;
use crate::params::{uniform, Binder, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionOptions {
    pub heads: usize,
    pub residual: bool,
    /// Divide scores by `sqrt(d_k)`.
    pub score_scaling: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_q: ParamId,
    pub b_k: ParamId,
    pub b_v: ParamId,
    pub b_o: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut add = |name: &str, t| store.add(format!("{prefix}.{name}"), t);
        Self {
            w_q: add("w_q", uniform(rng, &[d, d], bound)),
            w_k: add("w_k", uniform(rng, &[d, d], bound)),
            w_v: add("w_v", uniform(rng, &[d, d], bound)),
            w_o: add("w_o", uniform(rng, &[d, d], bound)),
            b_q: add("b_q", Tensor::zeros(&[d])),
            b_k: add("b_k", Tensor::zeros(&[d])),
            b_v: add("b_v", Tensor::zeros(&[d])),
            b_o: add("b_o", Tensor::zeros(&[d])),
            ln_gain: add("ln_gain", Tensor::full(&[d], 1.0)),
            ln_bias: add("ln_bias", Tensor::zeros(&[d])),
            w_1: add("w_1", uniform(rng, &[d, 4 * d], bound)),
            b_1: add("b_1", Tensor::zeros(&[4 * d])),
            w_2: add("w_2", uniform(rng, &[4 * d, d], bound / 2.0)),
            b_2: add("b_2", Tensor::zeros(&[d])),
        }
    }
}

fn affine<T: Real>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    x: Var,
    w: ParamId,
    b: ParamId,
) -> Result<Var, TensorError> {
    let wv = bind.bind(g, w);
    let bv = bind.bind(g, b);
    let xw = g.matmul(x, wv)?;
    g.add(xw, bv)
}

/// `[B, L, D] -> [B, h, L, D/h]`.
fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var, TensorError> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[b, l, heads, d / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// Runs the block on `y [B, L, D]`, returning the output and the attention
/// weights `[B, h, L, L]`.
pub fn attention_forward<T: Real>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    p: &AttentionParams,
    y: Var,
    mask: &BinaryMatrix,
    opts: &AttentionOptions,
) -> Result<(Var, Var), TensorError> {
    let s = g.shape(y).to_vec();
    if s.len() != 3 || opts.heads == 0 || s[2] % opts.heads != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: s,
            rhs: vec![opts.heads],
        });
    }
    let (bsz, l, d) = (s[0], s[1], s[2]);
    let dk = d / opts.heads;
    let q = affine(g, bind, y, p.w_q, p.b_q)?;
    let k = affine(g, bind, y, p.w_k, p.b_k)?;
    let v = affine(g, bind, y, p.w_v, p.b_v)?;
    let (q, k, v) = (
        split_heads(g, q, opts.heads)?,
        split_heads(g, k, opts.heads)?,
        split_heads(g, v, opts.heads)?,
    );
    let kt = g.transpose(k)?;
    let mut scores = g.matmul(q, kt)?;
    if opts.score_scaling {
        scores = g.scale(scores, T::of(1.0 / (dk as f64).sqrt()))?;
    }
    let alpha = g.masked_softmax(scores, mask)?;
    let heads = g.matmul(alpha, v)?;
    let merged = g.permute(heads, &[0, 2, 1, 3])?;
    let merged = g.reshape(merged, &[bsz, l, d])?;
    let mut attn = affine(g, bind, merged, p.w_o, p.b_o)?;
    if opts.residual {
        attn = g.add(attn, y)?;
    }
    let gain = bind.bind(g, p.ln_gain);
    let bias = bind.bind(g, p.ln_bias);
    let y_a = g.layer_norm(attn, gain, bias, T::of(LAYER_NORM_EPS))?;
    let hidden = affine(g, bind, y_a, p.w_1, p.b_1)?;
    let hidden = g.relu(hidden)?;
    let mut out = affine(g, bind, hidden, p.w_2, p.b_2)?;
    if opts.residual {
        out = g.add(out, y_a)?;
    }
    Ok((out, alpha))
}

/// Inference helper on plain tensors; accepts `[L, D]` or `[B, L, D]`.
pub fn run_attention(
    store: &ParamStore,
    p: &AttentionParams,
    y: &Tensor<f64>,
    mask: &BinaryMatrix,
    opts: &AttentionOptions,
) -> Result<(Tensor<f64>, Tensor<f64>), ModelError> {
    let mut g = Graph::<f64>::new();
    let mut bind = Binder::new(store, false);
    let batched = if y.rank() == 2 {
        let mut shape = vec![1];
        shape.extend_from_slice(y.shape());
        y.clone().reshaped(&shape)?
    } else {
        y.clone()
    };
    let yv = g.constant(batched);
    let (out, alpha) = attention_forward(&mut g, &mut bind, p, yv, mask, opts)?;
    let mut out = g.value(out).clone();
    if y.rank() == 2 {
        out = out.reshaped(y.shape())?;
    }
    Ok((out, g.value(alpha).clone()))
}
