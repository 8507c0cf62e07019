use super::kernels::{self, broadcast_shape, broadcast_strides, for_each_broadcast};
use super::tensor::{Real, Tensor};
use super::TensorError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation defined outside this module. Forward is computed by the
/// caller; only the vector-Jacobian product lives here.
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in input order. `None` means zero.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum Unary {
    Neg,
    Exp,
    Sigmoid,
    Silu,
    Relu,
    Softplus,
}

pub(super) enum Op<T: Real> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Reverse(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        offset: usize,
    },
    MaskedSoftmax(Var),
    Bce {
        pred: Var,
        target: Vec<T>,
        eps: T,
    },
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

pub(super) struct Node<T: Real> {
    pub(super) value: Tensor<T>,
    pub(super) op: Op<T>,
    pub(super) needs_grad: bool,
}

/// Eagerly evaluated computation graph with reverse-mode differentiation.
///
/// Every operation computes its value immediately and records how to
/// propagate gradients. A graph is single-owner; build one per forward pass.
pub struct Graph<T: Real> {
    pub(super) nodes: Vec<Node<T>>,
    guard_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            guard_finite: false,
        }
    }

    /// Makes every operation fail with [`TensorError::NonFinite`] as soon as
    /// it produces a NaN or infinity.
    pub fn with_finite_guard(mut self, on: bool) -> Self {
        self.guard_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(super) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if self.guard_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers the result of a fused op computed by the caller.
    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var, TensorError> {
        let name = op.name();
        let ins = inputs.clone();
        self.push(name, value, Op::Custom(inputs, op), &ins)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = move |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else {
            let out = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                TensorError::ShapeMismatch {
                    op: name,
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                }
            })?;
            let sa = broadcast_strides(ta.shape(), &out);
            let sb = broadcast_strides(tb.shape(), &out);
            let (da, db) = (ta.data(), tb.data());
            let mut data = Vec::with_capacity(out.iter().product());
            for_each_broadcast(&out, &sa, &sb, |_, i, j| data.push(f(da[i], db[j])));
            Tensor::from_parts(out, data)
        };
        self.push(name, value, Op::Binary(kind, a, b), &[a, b])
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var, TensorError> {
        let (name, f): (&'static str, fn(T) -> T) = match kind {
            Unary::Neg => ("neg", |v: T| -v),
            Unary::Exp => ("exp", |v: T| v.exp()),
            Unary::Sigmoid => ("sigmoid", kernels::sigmoid),
            Unary::Silu => ("silu", |v: T| v * kernels::sigmoid(v)),
            Unary::Relu => ("relu", |v: T| if v < T::zero() { T::zero() } else { v }),
            Unary::Softplus => ("softplus", kernels::softplus),
        };
        let value = self.value(x).map(f);
        self.push(name, value, Op::Unary(kind, x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Exp, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Sigmoid, x)
    }

    /// x * sigmoid(x).
    pub fn silu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Silu, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Relu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    /// `a [..., M, K] x b [K, N]` (b shared across the leading axes) or
    /// `a [..., M, K] x b [..., K, N]` with identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let n = sb[sb.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(mismatch());
        }
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, n]);
        let mut c = vec![T::zero(); batch * m * n];
        if sb.len() == 2 {
            kernels::gemm_acc(batch * m, k, n, ta.data(), tb.data(), &mut c);
        } else {
            if sb.len() != r || sb[..r - 2] != sa[..r - 2] {
                return Err(mismatch());
            }
            for bi in 0..batch {
                kernels::gemm_acc(
                    m,
                    k,
                    n,
                    &ta.data()[bi * m * k..(bi + 1) * m * k],
                    &tb.data()[bi * k * n..(bi + 1) * k * n],
                    &mut c[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        self.push("matmul", Tensor::from_parts(out_shape, c), Op::MatMul(a, b), &[a, b])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..t.rank()).collect::<Vec<_>>() {
            return Err(TensorError::InvalidAxis {
                op: "permute",
                axis: perm.to_vec(),
                rank: t.rank(),
            });
        }
        let (shape, data) = kernels::permute(t.data(), t.shape(), perm);
        self.push(
            "permute",
            Tensor::from_parts(shape, data),
            Op::Permute(x, perm.to_vec()),
            &[x],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: vec![],
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        self.check_axis("sum_axis", axis, t.rank())?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = t.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        self.push("sum_axis", Tensor::from_parts(shape, out), Op::SumAxis(x, axis), &[x])
    }

    fn check_axis(&self, op: &'static str, axis: usize, rank: usize) -> Result<(), TensorError> {
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op,
                axis: vec![axis],
                rank,
            });
        }
        Ok(())
    }

    /// Flips the order of entries along `axis`.
    pub fn reverse(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        self.check_axis("reverse", axis, t.rank())?;
        let data = reverse_data(t.data(), t.shape(), axis);
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("reverse", value, Op::Reverse(x, axis), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.value(*xs.first().ok_or(TensorError::Empty { op: "concat" })?);
        self.check_axis("concat", axis, first.rank())?;
        let base = first.shape().to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis), xs)
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        self.check_axis("slice", axis, t.rank())?;
        if len == 0 || start + len > t.shape()[axis] {
            return Err(TensorError::OutOfRange {
                op: "slice",
                index: start + len,
                len: t.shape()[axis],
            });
        }
        let (outer, full, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push(
            "slice",
            Tensor::from_parts(shape, data),
            Op::Slice { x, axis, start },
            &[x],
        )
    }

    /// Selects entries along the leading axis (repeats allowed).
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        let rows = t.shape()[0];
        let inner: usize = t.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::OutOfRange {
                    op: "gather",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
        }
        if indices.is_empty() {
            return Err(TensorError::Empty { op: "gather" });
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        self.push(
            "gather",
            Tensor::from_parts(shape, data),
            Op::Gather(x, indices.to_vec()),
            &[x],
        )
    }

    /// Reverse-mode sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        let rt = self.value(root);
        if rt.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: rt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(rt.shape(), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, contribution) in self.vjp(i, &g) {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sa = broadcast_strides(ta.shape(), y.shape());
                let sb = broadcast_strides(tb.shape(), y.shape());
                let gd = g.data();
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); ta.numel()];
                    let db = tb.data();
                    for_each_broadcast(y.shape(), &sa, &sb, |o, ia, ib| {
                        ga[ia] += match kind {
                            Binary::Add | Binary::Sub => gd[o],
                            Binary::Mul => gd[o] * db[ib],
                        }
                    });
                    out.push((*a, Tensor::from_parts(ta.shape().to_vec(), ga)));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); tb.numel()];
                    let da = ta.data();
                    for_each_broadcast(y.shape(), &sa, &sb, |o, ia, ib| {
                        gb[ib] += match kind {
                            Binary::Add => gd[o],
                            Binary::Sub => -gd[o],
                            Binary::Mul => gd[o] * da[ia],
                        }
                    });
                    out.push((*b, Tensor::from_parts(tb.shape().to_vec(), gb)));
                }
            }
            Op::Unary(kind, x) => {
                let tx = self.value(*x);
                let data = tx
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| {
                        gv * match kind {
                            Unary::Neg => -T::one(),
                            Unary::Exp => yv,
                            Unary::Sigmoid => yv * (T::one() - yv),
                            Unary::Silu => {
                                let s = kernels::sigmoid(xv);
                                s * (T::one() + xv * (T::one() - s))
                            }
                            Unary::Relu => {
                                if xv > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Softplus => kernels::sigmoid(xv),
                        }
                    })
                    .collect();
                out.push((*x, Tensor::from_parts(tx.shape().to_vec(), data)));
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * *c))),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..r - 2].iter().product();
                let gd = g.data();
                if sb.len() == 2 {
                    if self.needs(*a) {
                        let mut ga = vec![T::zero(); ta.numel()];
                        kernels::gemm_nt_acc(batch * m, n, k, gd, tb.data(), &mut ga);
                        out.push((*a, Tensor::from_parts(sa.to_vec(), ga)));
                    }
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); tb.numel()];
                        kernels::gemm_tn_acc(k, batch * m, n, ta.data(), gd, &mut gb);
                        out.push((*b, Tensor::from_parts(sb.to_vec(), gb)));
                    }
                } else {
                    let mut ga = vec![T::zero(); ta.numel()];
                    let mut gb = vec![T::zero(); tb.numel()];
                    for bi in 0..batch {
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        kernels::gemm_nt_acc(
                            m,
                            n,
                            k,
                            gs,
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                        kernels::gemm_tn_acc(
                            k,
                            m,
                            n,
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            gs,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    out.push((*a, Tensor::from_parts(sa.to_vec(), ga)));
                    out.push((*b, Tensor::from_parts(sb.to_vec(), gb)));
                }
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (shape, data) = kernels::permute(g.data(), g.shape(), &inverse);
                out.push((*x, Tensor::from_parts(shape, data)));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                out.push((*x, Tensor::from_parts(shape, g.data().to_vec())));
            }
            Op::SumAll(x) => {
                out.push((*x, Tensor::full(self.shape(*x), g.item())));
            }
            Op::SumAxis(x, axis) => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        data.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*x, Tensor::from_parts(shape, data)));
            }
            Op::Reverse(x, axis) => {
                let data = reverse_data(g.data(), g.shape(), *axis);
                out.push((*x, Tensor::from_parts(g.shape().to_vec(), data)));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut start = 0;
                for &v in xs {
                    let shape = self.shape(v).to_vec();
                    let len = shape[*axis];
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    start += len;
                    out.push((v, Tensor::from_parts(shape, data)));
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, full, inner) = split_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let mut data = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    data[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, Tensor::from_parts(shape, data)));
            }
            Op::Gather(x, indices) => {
                let shape = self.shape(*x).to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut data = vec![T::zero(); shape.iter().product()];
                for (row, &i) in indices.iter().enumerate() {
                    for (acc, &v) in data[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g.data()[row * inner..(row + 1) * inner])
                    {
                        *acc += v;
                    }
                }
                out.push((*x, Tensor::from_parts(shape, data)));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => out.extend(self.layer_norm_vjp(*x, *gain, *bias, normed, rstd, g)),
            Op::Conv1d {
                x,
                kernel,
                bias,
                offset,
            } => out.extend(self.conv1d_vjp(*x, *kernel, *bias, *offset, g)),
            Op::MaskedSoftmax(x) => out.push((*x, Self::softmax_vjp(y, g))),
            Op::Bce { pred, target, eps } => {
                out.push((*pred, self.bce_vjp(*pred, target, *eps, g)))
            }
            Op::Custom(inputs, op) => {
                let tensors: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                for (v, grad) in inputs.iter().zip(op.backward(&tensors, y, g, &needs)) {
                    if let Some(grad) = grad {
                        out.push((*v, grad));
                    }
                }
            }
        }
        out
    }
}

fn reverse_data<T: Real>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(data.len());
    for o in 0..outer {
        for l in (0..len).rev() {
            let base = (o * len + l) * inner;
            out.extend_from_slice(&data[base..base + inner]);
        }
    }
    out
}
