//! Central-difference verification of tape gradients.

use crate::diffcore::{BoundParams, ModelParams, Real, Tape, Var};
use crate::error::{Error, Result};

const EPS_ABS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the analytic gradient of `f` with respect to every scalar of
/// `params` against `(f(p+eps) - f(p-eps)) / 2eps`.
///
/// The error for one scalar is `|a - n| / max(|a|, |n|, 1e-12)`; the report
/// carries the maximum.
pub fn finite_diff_check<T, F>(f: F, params: &ModelParams<T>, eps: f64) -> Result<FdReport>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &BoundParams<'t, T>) -> Result<Var<'t, T>>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite_diff_check", "eps must be positive"));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("finite_diff_check: f(params)".into()));
    }
    tape.backward(loss)?;
    let grads = bound.grads();

    let eval = |p: &ModelParams<T>| -> Result<f64> {
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let v = f(&tape, &bound)?.item().as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_diff_check: perturbed f".into()));
        }
        Ok(v)
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_path: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = params.clone();
    let paths: Vec<String> = params.paths().map(str::to_owned).collect();
    for path in &paths {
        let analytic = grads.get(path).expect("bound path").clone();
        let n = analytic.numel();
        for i in 0..n {
            let orig = params.tensor(path)?.data()[i];
            work.get_mut(path).expect("path").tensor.data_mut()[i] = orig + T::lit(eps);
            let plus = eval(&work)?;
            work.get_mut(path).expect("path").tensor.data_mut()[i] = orig - T::lit(eps);
            let minus = eval(&work)?;
            work.get_mut(path).expect("path").tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(EPS_ABS);
            report.checked += 1;
            if rel > report.max_rel_error {
                report = FdReport {
                    max_rel_error: rel,
                    worst_path: path.clone(),
                    worst_index: i,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
