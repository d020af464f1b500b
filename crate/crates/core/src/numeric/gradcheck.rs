//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Magnitude below which differences are measured absolutely: the
    /// relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (tensor index, element index, analytic, numeric) at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares analytic gradients of a scalar computation with central
/// differences `(f(x+h) − f(x−h)) / 2h` for every element of `params`.
///
/// `f` receives a fresh graph and one `Var` per tensor in `params` (in
/// order) and returns the scalar loss. Only tensors in `params` are checked;
/// anything `f` captures by value is treated as frozen.
pub fn check_gradients<T, F>(params: &mut [Tensor<T>], opts: GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut eval = |params: &[Tensor<T>]| -> Result<(Graph<T>, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("gradient-check loss".into()));
        }
        Ok((g, loss, vars))
    };

    let (graph, loss, vars) = eval(params)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(params.iter())
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(graph);

    let h = T::of(opts.step);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
    };
    for ti in 0..params.len() {
        for ei in 0..params[ti].len() {
            let orig = params[ti].data()[ei];
            params[ti].data_mut()[ei] = orig + h;
            let plus = eval(params).map(|(g, l, _)| g.value(l).item());
            params[ti].data_mut()[ei] = orig - h;
            let minus = eval(params).map(|(g, l, _)| g.value(l).item());
            params[ti].data_mut()[ei] = orig;
            let numeric = (plus?.as_f64() - minus?.as_f64()) / (2.0 * opts.step);
            let a = analytic[ti].data()[ei].as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((ti, ei, a, numeric));
            }
        }
    }
    Ok(report)
}
