//! Fused neural-network operations with hand-written backward passes.

use super::graph::{Graph, Op, Var};
use super::tensor::{Real, Tensor};
use super::TensorError;
use crate::gf2::BinaryMatrix;

impl<T: Real> Graph<T> {
    /// Normalises each row of the last axis to zero mean and unit variance,
    /// then applies `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap_or(&0);
        if d < 2 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = t.numel() / d;
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut normed = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        let inv_d = T::one() / T::of(d as f64);
        for row in t.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                normed.push(xh);
                out.push(xh * gv[j] + bv[j]);
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub(super) fn layer_norm_vjp(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        normed: &[T],
        rstd: &[T],
        g: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let d = self.shape(gain)[0];
        let gv = self.value(gain).data();
        let mut dx = Vec::with_capacity(g.numel());
        let mut dgain = vec![T::zero(); d];
        let mut dbias = vec![T::zero(); d];
        let inv_d = T::one() / T::of(d as f64);
        for ((grow, xh), &r) in g.data().chunks_exact(d).zip(normed.chunks_exact(d)).zip(rstd) {
            let mut mean_dxh = T::zero();
            let mut mean_dxh_xh = T::zero();
            for j in 0..d {
                let dxh = grow[j] * gv[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
                dgain[j] += grow[j] * xh[j];
                dbias[j] += grow[j];
            }
            mean_dxh *= inv_d;
            mean_dxh_xh *= inv_d;
            for j in 0..d {
                let dxh = grow[j] * gv[j];
                dx.push(r * (dxh - mean_dxh - xh[j] * mean_dxh_xh));
            }
        }
        vec![
            (x, Tensor::from_parts(g.shape().to_vec(), dx)),
            (gain, Tensor::from_parts(vec![d], dgain)),
            (bias, Tensor::from_parts(vec![d], dbias)),
        ]
    }

    /// Per-channel convolution along the sequence axis of `x [..., L, D]`:
    /// `out[l, d] = bias[d] + sum_k kernel[k, d] * x[l - k + off, d]`, with
    /// `off = 0` when causal (output depends on `x[..=l]` only) and
    /// `(K - 1) / 2` otherwise. Out-of-range inputs are zero.
    pub fn conv1d_depthwise(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        causal: bool,
    ) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.shape();
        let ks = self.shape(kernel);
        if s.len() < 2 || ks.len() != 2 || ks[1] != s[s.len() - 1] || self.shape(bias) != [ks[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_depthwise",
                lhs: s.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let (l_len, d) = (s[s.len() - 2], s[s.len() - 1]);
        let k_len = ks[0];
        if k_len > l_len {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_depthwise",
                lhs: s.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let offset = if causal { 0 } else { (k_len - 1) / 2 };
        let (kd, bd) = (self.value(kernel).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(t.numel());
        for seq in t.data().chunks_exact(l_len * d) {
            for l in 0..l_len {
                for c in 0..d {
                    let mut acc = bd[c];
                    for k in 0..k_len {
                        if let Some(src) = (l + offset).checked_sub(k).filter(|&p| p < l_len) {
                            acc += kd[k * d + c] * seq[src * d + c];
                        }
                    }
                    out.push(acc);
                }
            }
        }
        let value = Tensor::from_parts(s.to_vec(), out);
        self.push(
            "conv1d_depthwise",
            value,
            Op::Conv1d {
                x,
                kernel,
                bias,
                offset,
            },
            &[x, kernel, bias],
        )
    }

    pub(super) fn conv1d_vjp(
        &self,
        x: Var,
        kernel: Var,
        bias: Var,
        offset: usize,
        g: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let t = self.value(x);
        let s = t.shape();
        let (l_len, d) = (s[s.len() - 2], s[s.len() - 1]);
        let kd = self.value(kernel).data();
        let k_len = self.shape(kernel)[0];
        let mut dx = vec![T::zero(); t.numel()];
        let mut dk = vec![T::zero(); k_len * d];
        let mut db = vec![T::zero(); d];
        for ((seq, gseq), dxseq) in t
            .data()
            .chunks_exact(l_len * d)
            .zip(g.data().chunks_exact(l_len * d))
            .zip(dx.chunks_exact_mut(l_len * d))
        {
            for l in 0..l_len {
                for c in 0..d {
                    let gv = gseq[l * d + c];
                    db[c] += gv;
                    for k in 0..k_len {
                        if let Some(src) = (l + offset).checked_sub(k).filter(|&p| p < l_len) {
                            dk[k * d + c] += gv * seq[src * d + c];
                            dxseq[src * d + c] += gv * kd[k * d + c];
                        }
                    }
                }
            }
        }
        vec![
            (x, Tensor::from_parts(s.to_vec(), dx)),
            (kernel, Tensor::from_parts(vec![k_len, d], dk)),
            (bias, Tensor::from_parts(vec![d], db)),
        ]
    }

    /// Softmax over the last axis of `x [..., L, L]` restricted to entries
    /// where `mask` is 1. Masked entries are excluded before normalisation
    /// and come out exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &BinaryMatrix) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.shape();
        let l = mask.rows();
        if s.len() < 2 || s[s.len() - 1] != mask.cols() || s[s.len() - 2] != l {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: s.to_vec(),
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        if let Some(row) = (0..l).find(|&r| mask.row(r).iter().all(|&b| b == 0)) {
            return Err(TensorError::EmptyMaskRow { row });
        }
        let cols = mask.cols();
        let mut out = vec![T::zero(); t.numel()];
        for (idx, (row, orow)) in t
            .data()
            .chunks_exact(cols)
            .zip(out.chunks_exact_mut(cols))
            .enumerate()
        {
            let allowed = mask.row(idx % l);
            let max = row
                .iter()
                .zip(allowed)
                .filter(|(_, &m)| m == 1)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for ((o, &v), &m) in orow.iter_mut().zip(row).zip(allowed) {
                if m == 1 {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / total;
            }
        }
        let value = Tensor::from_parts(s.to_vec(), out);
        self.push("masked_softmax", value, Op::MaskedSoftmax(x), &[x])
    }

    pub(super) fn softmax_vjp(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
        let cols = *y.shape().last().expect("rank >= 2");
        let mut dx = Vec::with_capacity(y.numel());
        for (yr, gr) in y.data().chunks_exact(cols).zip(g.data().chunks_exact(cols)) {
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
        }
        Tensor::from_parts(y.shape().to_vec(), dx)
    }

    /// Binary cross-entropy of probabilities `pred [..., C]` against 0/1
    /// targets: mean over the last axis, summed over all leading rows.
    /// Predictions are clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, target: &[u8], eps: T) -> Result<Var, TensorError> {
        let t = self.value(pred);
        if t.numel() != target.len() || t.rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                lhs: t.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let cols = *t.shape().last().expect("rank >= 1");
        let inv_c = T::one() / T::of(cols as f64);
        let target: Vec<T> = target.iter().map(|&b| T::of(f64::from(b))).collect();
        let hi = T::one() - eps;
        let loss: T = t
            .data()
            .iter()
            .zip(&target)
            .map(|(&p, &y)| {
                let p = p.max(eps).min(hi);
                -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
            })
            .sum::<T>()
            * inv_c;
        self.push(
            "bce",
            Tensor::scalar(loss),
            Op::Bce { pred, target, eps },
            &[pred],
        )
    }

    pub(super) fn bce_vjp(&self, pred: Var, target: &[T], eps: T, g: &Tensor<T>) -> Tensor<T> {
        let t = self.value(pred);
        let cols = *t.shape().last().expect("rank >= 1");
        let scale = g.item() / T::of(cols as f64);
        let hi = T::one() - eps;
        let data = t
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                if p < eps || p > hi {
                    T::zero()
                } else {
                    scale * ((T::one() - y) / (T::one() - p) - y / p)
                }
            })
            .collect();
        Tensor::from_parts(t.shape().to_vec(), data)
    }
}
