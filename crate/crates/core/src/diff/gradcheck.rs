//! Central finite-difference gradient checking.

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor of the relative error, so that gradients that are zero
/// up to round-off are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the tape's gradient of `f` against central differences with the
/// given `step` for every scalar of every parameter.
///
/// `f` receives one `Var` per parameter (in order) and must return a scalar.
pub fn check_gradients<F>(params: &mut ParamSet, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..params.len()).map(|i| tape.param(params, i)).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    params.zero_grad();
    let mut tape = Tape::new();
    let vars: Vec<Var> = (0..params.len()).map(|i| tape.param(params, i)).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root, params)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad
                .as_ref()
                .map(|g| g.data().to_vec())
                .unwrap_or_default()
        })
        .collect();
    params.zero_grad();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for pi in 0..params.len() {
        for j in 0..params.get(pi).value.len() {
            let orig = params.get(pi).value.data()[j];
            params.get_mut(pi).value.data_mut()[j] = orig + step;
            let plus = eval(params)?;
            params.get_mut(pi).value.data_mut()[j] = orig - step;
            let minus = eval(params)?;
            params.get_mut(pi).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[pi][j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((params.get(pi).name.clone(), j));
                }
            }
        }
    }
    Ok(report)
}
