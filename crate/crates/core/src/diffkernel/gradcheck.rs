//! Central finite-difference gradient checking.

use super::{ParamSet, Tensor2};

/// Step used by the acceptance checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Numerical gradient of `f` with respect to every parameter element.
pub fn numeric_param_grads(params: &ParamSet, h: f64, mut f: impl FnMut(&ParamSet) -> f64) -> Vec<Tensor2> {
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for id in params.ids() {
        let (r, c) = params.value(id).shape();
        let mut g = Tensor2::zeros(r, c);
        for k in 0..r * c {
            let orig = work.value(id).as_slice()[k];
            work.value_mut(id).as_mut_slice()[k] = orig + h;
            let plus = f(&work);
            work.value_mut(id).as_mut_slice()[k] = orig - h;
            let minus = f(&work);
            work.value_mut(id).as_mut_slice()[k] = orig;
            g.as_mut_slice()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Numerical gradient of `f` with respect to a plain tensor input.
pub fn numeric_input_grad(input: &Tensor2, h: f64, mut f: impl FnMut(&Tensor2) -> f64) -> Tensor2 {
    let mut work = input.clone();
    let mut g = Tensor2::zeros(input.rows(), input.cols());
    for k in 0..input.len() {
        let orig = work.as_slice()[k];
        work.as_mut_slice()[k] = orig + h;
        let plus = f(&work);
        work.as_mut_slice()[k] = orig - h;
        let minus = f(&work);
        work.as_mut_slice()[k] = orig;
        g.as_mut_slice()[k] = (plus - minus) / (2.0 * h);
    }
    g
}

/// Largest relative error between the analytic gradients held in `params`
/// and the numeric gradients of `f`.
pub fn max_param_grad_error(params: &ParamSet, h: f64, f: impl FnMut(&ParamSet) -> f64) -> f64 {
    let numeric = numeric_param_grads(params, h, f);
    params
        .ids()
        .zip(&numeric)
        .flat_map(|(id, n)| {
            params
                .grad(id)
                .as_slice()
                .iter()
                .zip(n.as_slice())
                .map(|(&a, &b)| relative_error(a, b))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}
