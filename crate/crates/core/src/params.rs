//! Named parameter storage shared by every model component.
//!
//! Master values are always kept in `f64`; a [`Binder`] casts them into the
//! precision of the graph being built and remembers which graph node holds
//! which parameter, so gradients can be routed back by [`ParamId`].

use std::collections::HashMap;
use std::marker::PhantomData;

use rand::Rng;

use crate::autodiff::{relative_error, Gradients, Graph, Real, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor<f64>,
    pub trainable: bool,
}

/// Ordered collection of parameters with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter.
    ///
    /// # Panics
    /// If `name` is already taken; names are generated by model code, so a
    /// clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// Uniform samples in `[-bound, bound)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

/// Maps parameters into one graph, creating each node at most once.
pub struct Binder<'a, T: Real> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    differentiable: bool,
    _elem: PhantomData<fn() -> T>,
}

impl<'a, T: Real> Binder<'a, T> {
    /// With `differentiable = false` parameters enter the graph as constants,
    /// which skips all gradient bookkeeping during inference.
    pub fn new(store: &'a ParamStore, differentiable: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            differentiable,
            _elem: PhantomData,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn bind(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let value = p.tensor.cast::<T>();
        let v = if self.differentiable && p.trainable {
            g.leaf(value)
        } else {
            g.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients aligned with the store; parameters that were never bound or
    /// are unreachable from the root come back as zeros.
    pub fn collect(&self, grads: &Gradients<T>) -> Vec<Tensor<f64>> {
        self.store
            .iter()
            .zip(&self.vars)
            .map(|(p, v)| {
                v.and_then(|v| grads.get(v))
                    .map(|t| t.cast::<f64>())
                    .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
            })
            .collect()
    }
}

/// Adds `src` into `dst` elementwise, parameter by parameter.
pub fn accumulate(dst: &mut [Tensor<f64>], src: &[Tensor<f64>]) -> Result<(), TensorError> {
    for (d, s) in dst.iter_mut().zip(src) {
        if d.shape() != s.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate",
                lhs: d.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        d.add_assign(s);
    }
    Ok(())
}

/// Central-difference step used for parameter gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error. Rounding noise of a central
/// difference is about `eps * |loss| / step`, roughly 1e-11 for unit-scale
/// losses, so gradients below this floor are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

/// Agreement required between the `h` and `h/2` stencils before a
/// difference quotient is trusted.
pub const SMOOTH_TOL: f64 = 1e-6;

/// Smallest step tried when stencils keep disagreeing.
pub const MIN_FD_STEP: f64 = 1e-8;

/// Outcome of [`check_param_gradients`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Compares reverse-mode gradients of a scalar loss with respect to every
/// trainable parameter against central differences, starting from step
/// `step` and shrinking it near kinks of the loss.
///
/// `loss` builds the scalar in a fresh `f64` graph; it runs once with
/// differentiable parameters and at least four times per parameter entry with constants.
pub fn check_param_gradients<E, F>(
    store: &ParamStore,
    step: f64,
    floor: f64,
    loss: F,
) -> Result<ParamCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph<f64>, &mut Binder<'_, f64>) -> Result<Var, E>,
{
    let analytic = {
        let mut g = Graph::new();
        let mut bind = Binder::new(store, true);
        let root = loss(&mut g, &mut bind)?;
        bind.collect(&g.backward(root)?)
    };
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let mut bind = Binder::new(s, false);
        let root = loss(&mut g, &mut bind)?;
        Ok(g.value(root).item())
    };
    let mut work = store.clone();
    let mut report = ParamCheckReport::default();
    for id in store.ids() {
        if !store.get(id).trainable {
            continue;
        }
        for e in 0..store.get(id).tensor.numel() {
            let orig = store.get(id).tensor.data()[e];
            let mut central = |h: f64| -> Result<(f64, f64), E> {
                work.get_mut(id).tensor.data_mut()[e] = orig + h;
                let plus = eval(&work)?;
                work.get_mut(id).tensor.data_mut()[e] = orig - h;
                let minus = eval(&work)?;
                work.get_mut(id).tensor.data_mut()[e] = orig;
                Ok(((plus - minus) / (2.0 * h), plus.abs().max(minus.abs())))
            };
            // A ReLU or clamp kink inside the stencil makes the difference
            // quotient depend on h; shrink the step until two stencils agree
            // to within rounding noise.
            let mut h = step;
            let numeric = loop {
                let (wide, scale) = central(h)?;
                let (narrow, _) = central(h / 2.0)?;
                let noise = 16.0 * f64::EPSILON * (scale + 1.0) / h;
                if (wide - narrow).abs() <= SMOOTH_TOL * wide.abs().max(narrow.abs()) + noise || h <= MIN_FD_STEP {
                    break wide;
                }
                h /= 10.0;
            };
            let err = relative_error(analytic[id.0].data()[e], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), e));
            }
        }
    }
    Ok(report)
}
