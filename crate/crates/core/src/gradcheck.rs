//! Central finite-difference gradient checks against the tape.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Step used by every check in this crate.
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor of the relative error, so gradients that are exactly
/// zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of `loss` with central differences for every
/// scalar of every parameter in `store` (or only `only`, when given).
pub fn check_params<F>(store: &mut ParamStore<f64>, only: Option<&[ParamId]>, loss: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    store.zero_grad();
    {
        let tape = Tape::new();
        let l = loss(&tape, store)?;
        tape.backward(l, store)?;
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::no_grad();
        let l = loss(&tape, s)?;
        Ok(l.value().data()[0])
    };

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.iter().map(|(id, _)| id).collect(),
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in ids {
        let original: Tensor<f64> = store.value(id).clone();
        let analytic: Vec<f64> = store
            .grad(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; original.len()]);
        for i in 0..original.len() {
            let mut plus = original.clone();
            plus.data_mut()[i] += FD_STEP;
            store.set_value(id, plus)?;
            let fp = eval(store)?;
            let mut minus = original.clone();
            minus.data_mut()[i] -= FD_STEP;
            store.set_value(id, minus)?;
            let fm = eval(store)?;
            store.set_value(id, original.clone())?;

            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err.max(report.max_rel_err);
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
                report.analytic = analytic[i];
                report.numeric = numeric;
            }
        }
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_passes() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::from_f64(vec![3], &[0.3, -1.2, 2.0]).unwrap());
        let r = check_params(&mut store, None, |tape, s| {
            let x = tape.param(s, crate::params::ParamId(0));
            Ok(x.mul(x)?.mul(x)?.sum())
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passes(1e-6), "{r:?}");
    }
}
