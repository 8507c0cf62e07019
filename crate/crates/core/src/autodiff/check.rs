//! Central finite-difference gradient checking.

use super::{Graph, Real, Tensor, TensorError, Var};

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `step`, element by element.
///
/// `f` builds the scalar from leaves holding `inputs`; it is called once for
/// the analytic pass and twice per element.
pub fn check_gradients<T, F>(
    inputs: &[Tensor<T>],
    step: f64,
    floor: f64,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor<T>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item().as_f64())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(Tensor::to_f64_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (e, &a) in analytic.iter().enumerate() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = T::of(orig.as_f64() + step);
            let plus = eval(&work)?;
            work[i].data_mut()[e] = T::of(orig.as_f64() - step);
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((i, e));
                }
            }
        }
    }
    Ok(report)
}
