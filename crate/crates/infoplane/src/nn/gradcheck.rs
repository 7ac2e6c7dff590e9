//! Central finite-difference gradient checking against the tape.

use std::collections::BTreeMap;

use super::graph::Arr;
use super::params::ParamSet;

/// Numeric gradient of `f` w.r.t. the named parameter, by central
/// differences with the given step.
pub fn finite_diff_param(
    params: &ParamSet,
    name: &str,
    step: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> Arr {
    let mut work = params.clone();
    let shape = params.param(name).raw_dim();
    let mut grad = Arr::zeros(shape.clone());
    let n = params.param(name).len();
    for idx in 0..n {
        let base = params.param(name).as_slice().unwrap()[idx];
        work.param_mut(name).as_slice_mut().unwrap()[idx] = base + step;
        let hi = f(&work);
        work.param_mut(name).as_slice_mut().unwrap()[idx] = base - step;
        let lo = f(&work);
        work.param_mut(name).as_slice_mut().unwrap()[idx] = base;
        grad.as_slice_mut().unwrap()[idx] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Largest relative disagreement between two gradient tensors, where the
/// denominator saturates at `scale_floor` to keep near-zero entries from
/// dominating.
pub fn max_rel_err(analytic: &Arr, numeric: &Arr, scale_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(scale_floor))
        .fold(0.0, f64::max)
}

/// Check every parameter of `params` against finite differences of `f`.
/// Returns the worst (name, relative error) pair.
pub fn check_all_params(
    params: &ParamSet,
    step: f64,
    scale_floor: f64,
    analytic: &BTreeMap<String, Arr>,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> (String, f64) {
    let mut worst = (String::new(), 0.0);
    for name in params.param_names() {
        let numeric = finite_diff_param(params, name, step, &mut f);
        let zero = Arr::zeros(params.param(name).raw_dim());
        let a = analytic.get(name).unwrap_or(&zero);
        let err = max_rel_err(a, &numeric, scale_floor);
        if err > worst.1 {
            worst = (name.clone(), err);
        }
    }
    worst
}
