//! Central-difference gradient checking.

use std::collections::HashMap;

use crate::autodiff::{gradient_of, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub evaluations: usize,
}

/// Compares tape gradients of `f` against central differences with step `eps`.
///
/// `f` builds a scalar loss on a fresh tape from the given parameters. The
/// error per entry is `|analytic - numeric| / max(1, |numeric|)`.
pub fn check_gradients<F>(f: F, point: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, point)?;
    if !tape.value(loss).all_finite() {
        return Err(Error::Numerical {
            param: point.names().next().unwrap_or("<none>").to_string(),
        });
    }
    let analytic: HashMap<String, Tensor> = gradient_of(&tape, loss, point)?;

    let eval = |p: &ParamStore, name: &str| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        let v = t.value(l).item();
        if !v.is_finite() {
            return Err(Error::Numerical {
                param: name.to_string(),
            });
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        evaluations: 0,
    };
    let mut probe = point.clone();
    let names: Vec<String> = point.names().map(str::to_string).collect();
    for name in &names {
        let len = point.get(name).map_or(0, Tensor::len);
        for i in 0..len {
            let orig = point.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&probe, name)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&probe, name)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            report.evaluations += 2;

            let numeric = (up - down) / (2.0 * eps);
            let exact = analytic[name].data()[i];
            let rel = (exact - numeric).abs() / numeric.abs().max(1.0);
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst_param = name.clone();
            }
        }
    }
    Ok(report)
}
