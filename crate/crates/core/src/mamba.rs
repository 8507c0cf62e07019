//! Bidirectional selective state-space block with parity-check masking.
//!
//! For one direction and one sequence `y [L, D]`:
//!
//! ```text
//! u      = y W_u                      z  = silu(y W_z)
//! uc     = causal_conv(u)             B  = uc W_b^T,  C = uc W_c^T
//! delta  = softplus(W_delta * uc)     A  = -exp(A_log)
//! Abar   = exp(delta[l,d] A[d,s])     Bbar[l,d,s] = delta[l,d] B[l,s]
//! h_l    = Abar_l * h_{l-1} + (mask_b * Bbar)_l * uc_l      (h_0 = 0)
//! u_ssm  = sum_s h_l[., s] (mask_c * C)[l, s] + R * uc
//! out    = z * u_ssm
//! ```
//!
//! The masks come from an `L x M` participation matrix (`M = n - k` for the
//! default mask): `mask_b[l, d]` gates state row `d`, `mask_c[l, s]` gates
//! readout column `s`. Indices at or beyond `M` are zeroed or passed through
//! according to [`TailMode`]. The reverse direction runs the same pass on the
//! flipped sequence with flipped mask rows and flips the result back.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Real, Tensor, TensorError, Var};
use crate::gf2::BinaryMatrix;
use crate::model::ModelError;
use crate::params::{uniform, Binder, ParamId, ParamStore};

/// What the scan masks do with channels at or beyond the mask width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    /// Channels beyond the mask width are zeroed.
    #[default]
    Zero,
    /// Channels beyond the mask width are left untouched.
    Pass,
}

/// How the recurrence is evaluated. Both give the same values and
/// gradients; the fused kernel is much faster.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanImpl {
    #[default]
    Fused,
    /// One graph node per step and operation.
    Composed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaOptions {
    pub tail_mode: TailMode,
    /// Pass the step sizes through softplus.
    pub delta_softplus: bool,
    /// Parameterize `A = -exp(A_log)` instead of using `A_log` directly.
    pub a_negative_exp: bool,
    pub scan: ScanImpl,
}

impl Default for MambaOptions {
    fn default() -> Self {
        Self {
            tail_mode: TailMode::Zero,
            delta_softplus: true,
            a_negative_exp: true,
            scan: ScanImpl::Fused,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaDims {
    pub seq_len: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub k_conv: usize,
}

/// Parameters of one scan direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaParams {
    pub w_u: ParamId,
    pub w_z: ParamId,
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub a_log: ParamId,
    pub r: ParamId,
}

impl MambaParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: MambaDims,
        rng: &mut R,
    ) -> Self {
        let MambaDims {
            seq_len: l,
            d_model: d,
            d_state: s,
            k_conv: k,
        } = dims;
        let bound = 1.0 / (d as f64).sqrt();
        let mut add = |name: &str, t| store.add(format!("{prefix}.{name}"), t);
        let w_u = add("w_u", uniform(rng, &[d, d], bound));
        let w_z = add("w_z", uniform(rng, &[d, d], bound));
        let conv_kernel = add("conv_kernel", uniform(rng, &[k, d], 1.0 / (k as f64).sqrt()));
        let conv_bias = add("conv_bias", Tensor::zeros(&[d]));
        let w_b = add("w_b", uniform(rng, &[s, d], bound));
        let w_c = add("w_c", uniform(rng, &[s, d], bound));
        let w_delta = add("w_delta", uniform(rng, &[l, d], bound));
        let a_log_data = (0..d).flat_map(|_| (0..s).map(|j| ((j + 1) as f64).ln())).collect();
        let a_log = add("a_log", Tensor::new(vec![d, s], a_log_data).expect("dims"));
        let r = add("r", Tensor::full(&[d], 1.0));
        Self {
            w_u,
            w_z,
            conv_kernel,
            conv_bias,
            w_b,
            w_c,
            w_delta,
            a_log,
            r,
        }
    }
}

/// A bidirectional block: `backward` is `None` when both directions share
/// the forward parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaLayer {
    pub forward: MambaParams,
    pub backward: Option<MambaParams>,
}

impl MambaLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: MambaDims,
        shared_directions: bool,
        rng: &mut R,
    ) -> Self {
        if shared_directions {
            Self {
                forward: MambaParams::init(store, prefix, dims, rng),
                backward: None,
            }
        } else {
            Self {
                forward: MambaParams::init(store, &format!("{prefix}.fwd"), dims, rng),
                backward: Some(MambaParams::init(store, &format!("{prefix}.bwd"), dims, rng)),
            }
        }
    }

    pub fn backward_params(&self) -> &MambaParams {
        self.backward.as_ref().unwrap_or(&self.forward)
    }
}

/// Multiplicative scan masks: `b [L, D]` for state rows and `c [L, S]` for
/// readout columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanMasks {
    pub b: Tensor<f64>,
    pub c: Tensor<f64>,
}

impl ScanMasks {
    /// Builds masks from an `L x M` participation matrix.
    pub fn new(
        pmask: &BinaryMatrix,
        d_model: usize,
        d_state: usize,
        tail: TailMode,
    ) -> Result<Self, ModelError> {
        let (l, m) = (pmask.rows(), pmask.cols());
        if m > d_model || m > d_state {
            return Err(ModelError::MaskTooWide {
                width: m,
                d_model,
                d_state,
            });
        }
        let tail_value = match tail {
            TailMode::Zero => 0.0,
            TailMode::Pass => 1.0,
        };
        let build = |width: usize| {
            let data = (0..l)
                .flat_map(|r| {
                    (0..width).map(move |c| {
                        if c < m {
                            f64::from(pmask.get(r, c))
                        } else {
                            tail_value
                        }
                    })
                })
                .collect();
            Tensor::new(vec![l, width], data).expect("dims")
        };
        Ok(Self {
            b: build(d_model),
            c: build(d_state),
        })
    }

    /// Masks for the reverse direction (rows flipped).
    pub fn reversed(&self) -> Self {
        let flip = |t: &Tensor<f64>| {
            let cols = t.shape()[1];
            let data = t.data().chunks_exact(cols).rev().flatten().copied().collect();
            Tensor::new(t.shape().to_vec(), data).expect("dims")
        };
        Self {
            b: flip(&self.b),
            c: flip(&self.c),
        }
    }

    fn bind<T: Real>(&self, g: &mut Graph<T>) -> MaskVars {
        MaskVars {
            b: g.constant(self.b.cast()),
            c: g.constant(self.c.cast()),
        }
    }
}

/// Masks for both directions of a layer, already in a graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerMasks {
    fwd: MaskVars,
    bwd: MaskVars,
}

#[derive(Clone, Copy, Debug)]
struct MaskVars {
    b: Var,
    c: Var,
}

impl LayerMasks {
    pub fn bind<T: Real>(g: &mut Graph<T>, masks: &ScanMasks) -> Self {
        Self {
            fwd: masks.bind(g),
            bwd: masks.reversed().bind(g),
        }
    }
}

/// Applies the scan masks to explicit `Bbar [L, D, S]` and `C [L, S]`.
pub fn apply_scan_masks(
    b_bar: &Tensor<f64>,
    c: &Tensor<f64>,
    masks: &ScanMasks,
) -> Result<(Tensor<f64>, Tensor<f64>), ModelError> {
    let (l, d) = (masks.b.shape()[0], masks.b.shape()[1]);
    let s = masks.c.shape()[1];
    if b_bar.shape() != [l, d, s] || c.shape() != [l, s] {
        return Err(TensorError::ShapeMismatch {
            op: "apply_scan_masks",
            lhs: b_bar.shape().to_vec(),
            rhs: vec![l, d, s],
        }
        .into());
    }
    let mut bm = b_bar.clone();
    for (i, v) in bm.data_mut().iter_mut().enumerate() {
        *v *= masks.b.data()[i / s];
    }
    let mut cm = c.clone();
    for (v, m) in cm.data_mut().iter_mut().zip(masks.c.data()) {
        *v *= m;
    }
    Ok((bm, cm))
}

/// Graph nodes of one direction before the recurrence.
struct Prepared {
    z: Var,
    uc: Var,
    delta: Var,
    a: Var,
    b: Var,
    c_masked: Var,
    /// `mask_b * delta * uc`, the per-row drive of the state.
    drive: Var,
}

fn prepare<T: Real>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    p: &MambaParams,
    y: Var,
    masks: MaskVars,
    opts: &MambaOptions,
) -> Result<Prepared, TensorError> {
    let w_u = bind.bind(g, p.w_u);
    let w_z = bind.bind(g, p.w_z);
    let u = g.matmul(y, w_u)?;
    let zl = g.matmul(y, w_z)?;
    let z = g.silu(zl)?;
    let kernel = bind.bind(g, p.conv_kernel);
    let cbias = bind.bind(g, p.conv_bias);
    let uc = g.conv1d_depthwise(u, kernel, cbias, true)?;
    let w_b = bind.bind(g, p.w_b);
    let w_c = bind.bind(g, p.w_c);
    let w_bt = g.transpose(w_b)?;
    let w_ct = g.transpose(w_c)?;
    let b = g.matmul(uc, w_bt)?;
    let c = g.matmul(uc, w_ct)?;
    let w_delta = bind.bind(g, p.w_delta);
    let pre = g.mul(uc, w_delta)?;
    let delta = if opts.delta_softplus { g.softplus(pre)? } else { pre };
    let a_log = bind.bind(g, p.a_log);
    let a = if opts.a_negative_exp {
        let e = g.exp(a_log)?;
        g.neg(e)?
    } else {
        a_log
    };
    let c_masked = g.mul(c, masks.c)?;
    let du = g.mul(delta, uc)?;
    let drive = g.mul(du, masks.b)?;
    Ok(Prepared {
        z,
        uc,
        delta,
        a,
        b,
        c_masked,
        drive,
    })
}

/// One scan direction over `y [B, L, D]`; returns `[B, L, D]`.
pub fn directional_pass<T: Real>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    p: &MambaParams,
    y: Var,
    masks: &ScanMasks,
    opts: &MambaOptions,
) -> Result<Var, TensorError> {
    let mv = masks.bind(g);
    directional(g, bind, p, y, mv, opts)
}

fn directional<T: Real>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    p: &MambaParams,
    y: Var,
    masks: MaskVars,
    opts: &MambaOptions,
) -> Result<Var, TensorError> {
    let pr = prepare(g, bind, p, y, masks, opts)?;
    let ssm = match opts.scan {
        ScanImpl::Fused => fused_scan(g, &pr)?,
        ScanImpl::Composed => composed_scan(g, &pr)?,
    };
    let r = bind.bind(g, p.r);
    let skip = g.mul(pr.uc, r)?;
    let u_ssm = g.add(ssm, skip)?;
    g.mul(pr.z, u_ssm)
}

/// Both directions summed; `y [B, L, D]`.
pub fn bidirectional_forward<T: Real>(
    g: &mut Graph<T>,
    bind: &mut Binder<'_, T>,
    layer: &MambaLayer,
    y: Var,
    masks: &LayerMasks,
    opts: &MambaOptions,
) -> Result<Var, TensorError> {
    let fwd = directional(g, bind, &layer.forward, y, masks.fwd, opts)?;
    let seq_axis = g.shape(y).len() - 2;
    let yr = g.reverse(y, seq_axis)?;
    let bwd = directional(g, bind, layer.backward_params(), yr, masks.bwd, opts)?;
    let bwd = g.reverse(bwd, seq_axis)?;
    g.add(fwd, bwd)
}

fn dims4(g: &Graph<impl Real>, uc: Var, c: Var) -> (usize, usize, usize, usize) {
    let s = g.shape(uc);
    let r = s.len();
    let batch = s[..r - 2].iter().product();
    (batch, s[r - 2], s[r - 1], *g.shape(c).last().expect("rank"))
}

fn composed_scan<T: Real>(g: &mut Graph<T>, pr: &Prepared) -> Result<Var, TensorError> {
    let (bsz, l, d, s) = dims4(g, pr.uc, pr.c_masked);
    let delta = g.reshape(pr.delta, &[bsz, l, d, 1])?;
    let da = g.mul(delta, pr.a)?;
    let a_bar = g.exp(da)?;
    let drive = g.reshape(pr.drive, &[bsz, l, d, 1])?;
    let b = g.reshape(pr.b, &[bsz, l, 1, s])?;
    let x = g.mul(drive, b)?;
    let c = g.reshape(pr.c_masked, &[bsz, l, 1, s])?;
    let mut h: Option<Var> = None;
    let mut outs = Vec::with_capacity(l);
    for step in 0..l {
        let xs = g.slice(x, 1, step, 1)?;
        let xs = g.reshape(xs, &[bsz, d, s])?;
        let next = match h {
            None => xs,
            Some(prev) => {
                let a = g.slice(a_bar, 1, step, 1)?;
                let a = g.reshape(a, &[bsz, d, s])?;
                let decayed = g.mul(a, prev)?;
                g.add(decayed, xs)?
            }
        };
        h = Some(next);
        let cs = g.slice(c, 1, step, 1)?;
        let cs = g.reshape(cs, &[bsz, 1, s])?;
        let prod = g.mul(next, cs)?;
        let ys = g.sum_axis(prod, 2)?;
        outs.push(g.reshape(ys, &[bsz, 1, d])?);
    }
    let y = g.concat(&outs, 1)?;
    let shape = g.shape(pr.uc).to_vec();
    g.reshape(y, &shape)
}

struct ScanOp<T> {
    dims: (usize, usize, usize, usize),
    /// All states `h_l`, `[B, L, D, S]`.
    states: Vec<T>,
}

fn fused_scan<T: Real>(g: &mut Graph<T>, pr: &Prepared) -> Result<Var, TensorError> {
    let dims @ (bsz, l, d, s) = dims4(g, pr.uc, pr.c_masked);
    let (delta, a, b, c, v) = (
        g.value(pr.delta).data(),
        g.value(pr.a).data(),
        g.value(pr.b).data(),
        g.value(pr.c_masked).data(),
        g.value(pr.drive).data(),
    );
    let mut states = vec![T::zero(); bsz * l * d * s];
    let mut out = vec![T::zero(); bsz * l * d];
    for bi in 0..bsz {
        for step in 0..l {
            let row = bi * l + step;
            let (bs, cs) = (&b[row * s..(row + 1) * s], &c[row * s..(row + 1) * s]);
            for di in 0..d {
                let dl = delta[row * d + di];
                let vl = v[row * d + di];
                let base = (row * d + di) * s;
                let mut acc = T::zero();
                for si in 0..s {
                    let prev = if step == 0 {
                        T::zero()
                    } else {
                        states[base - d * s + si]
                    };
                    let h = (dl * a[di * s + si]).exp() * prev + vl * bs[si];
                    states[base + si] = h;
                    acc += h * cs[si];
                }
                out[row * d + di] = acc;
            }
        }
    }
    let shape = g.shape(pr.uc).to_vec();
    let value = Tensor::new(shape, out)?;
    g.custom(
        vec![pr.delta, pr.a, pr.b, pr.c_masked, pr.drive],
        value,
        Box::new(ScanOp { dims, states }),
    )
}

impl<T: Real> CustomOp<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (bsz, l, d, s) = self.dims;
        let (delta, a, b, c, v) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let gy = grad.data();
        let h = &self.states;
        let mut d_delta = vec![T::zero(); delta.len()];
        let mut d_a = vec![T::zero(); a.len()];
        let mut d_b = vec![T::zero(); b.len()];
        let mut d_c = vec![T::zero(); c.len()];
        let mut d_v = vec![T::zero(); v.len()];
        // carry[d, s]: gradient w.r.t. h_l flowing back from later steps.
        let mut carry = vec![T::zero(); d * s];
        for bi in 0..bsz {
            carry.iter_mut().for_each(|x| *x = T::zero());
            for step in (0..l).rev() {
                let row = bi * l + step;
                for di in 0..d {
                    let gyv = gy[row * d + di];
                    let dl = delta[row * d + di];
                    let base = (row * d + di) * s;
                    let mut dv = T::zero();
                    let mut dd = T::zero();
                    for si in 0..s {
                        let cidx = di * s + si;
                        let gh = carry[cidx] + gyv * c[row * s + si];
                        d_c[row * s + si] += gyv * h[base + si];
                        dv += gh * b[row * s + si];
                        d_b[row * s + si] += gh * v[row * d + di];
                        let a_bar = (dl * a[cidx]).exp();
                        if step > 0 {
                            let g_abar = gh * h[base - d * s + si] * a_bar;
                            dd += g_abar * a[cidx];
                            d_a[cidx] += g_abar * dl;
                        }
                        carry[cidx] = a_bar * gh;
                    }
                    d_v[row * d + di] += dv;
                    d_delta[row * d + di] += dd;
                }
            }
        }
        [
            (inputs[0], d_delta),
            (inputs[1], d_a),
            (inputs[2], d_b),
            (inputs[3], d_c),
            (inputs[4], d_v),
        ]
        .into_iter()
        .map(|(t, data)| Some(Tensor::new(t.shape().to_vec(), data).expect("shape")))
        .collect()
    }
}

/// Intermediate scan quantities of one direction for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanInputs {
    /// `[L, D, S]`.
    pub a_bar: Tensor<f64>,
    /// Masked `Bbar`, `[L, D, S]`.
    pub b_bar_masked: Tensor<f64>,
    /// Masked `C`, `[L, S]`.
    pub c_masked: Tensor<f64>,
    /// `[L, D]`.
    pub u_conv: Tensor<f64>,
}

/// Recomputes the scan inputs of the forward direction for `y [L, D]`.
pub fn scan_inputs(
    store: &ParamStore,
    p: &MambaParams,
    y: &Tensor<f64>,
    masks: &ScanMasks,
    opts: &MambaOptions,
) -> Result<ScanInputs, ModelError> {
    let mut g = Graph::<f64>::new();
    let mut bind = Binder::new(store, false);
    let yv = g.constant(y.clone());
    let mv = masks.bind(&mut g);
    let pr = prepare(&mut g, &mut bind, p, yv, mv, opts)?;
    let (l, d) = (y.shape()[0], y.shape()[1]);
    let s = masks.c.shape()[1];
    let (delta, a, b) = (g.value(pr.delta), g.value(pr.a), g.value(pr.b));
    let mut a_bar = Vec::with_capacity(l * d * s);
    let mut b_bar = Vec::with_capacity(l * d * s);
    for li in 0..l {
        for di in 0..d {
            let dl = delta.data()[li * d + di];
            for si in 0..s {
                a_bar.push((dl * a.data()[di * s + si]).exp());
                b_bar.push(dl * b.data()[li * s + si]);
            }
        }
    }
    let b_bar = Tensor::new(vec![l, d, s], b_bar)?;
    let c = g.value(pr.c_masked).clone();
    let (b_bar_masked, _) = apply_scan_masks(&b_bar, &c, masks)?;
    Ok(ScanInputs {
        a_bar: Tensor::new(vec![l, d, s], a_bar)?,
        b_bar_masked,
        c_masked: c,
        u_conv: g.value(pr.uc).clone(),
    })
}

/// Inference helper: one direction on plain tensors (`[L, D]` or `[B, L, D]`).
pub fn run_directional(
    store: &ParamStore,
    p: &MambaParams,
    y: &Tensor<f64>,
    masks: &ScanMasks,
    opts: &MambaOptions,
) -> Result<Tensor<f64>, ModelError> {
    let mut g = Graph::<f64>::new();
    let mut bind = Binder::new(store, false);
    let yv = g.constant(y.clone());
    let out = directional_pass(&mut g, &mut bind, p, yv, masks, opts)?;
    Ok(g.value(out).clone())
}

/// Inference helper: both directions on plain tensors.
pub fn run_bidirectional(
    store: &ParamStore,
    layer: &MambaLayer,
    y: &Tensor<f64>,
    masks: &ScanMasks,
    opts: &MambaOptions,
) -> Result<Tensor<f64>, ModelError> {
    let mut g = Graph::<f64>::new();
    let mut bind = Binder::new(store, false);
    let yv = g.constant(y.clone());
    let lm = LayerMasks::bind(&mut g, masks);
    let out = bidirectional_forward(&mut g, &mut bind, layer, yv, &lm, opts)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests;
