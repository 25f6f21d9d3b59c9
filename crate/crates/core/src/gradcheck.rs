//! Central finite-difference oracle for analytic gradients.

use crate::error::{G2gError, Result};
use crate::params::ParamStore;

/// Default perturbation for [`check_gradient`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check: the worst coordinate and its two estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares the gradient written by `f` against central differences.
///
/// `f` evaluates the loss at the current parameter values and accumulates
/// its analytic gradient into the store's gradient slots. Gradients are
/// zeroed once before the analytic call; during perturbed calls they are
/// ignored. The error at each trainable coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn check_gradient<F>(mut f: F, params: &mut ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(G2gError::Config(format!("gradient check step must be > 0, got {step}")));
    }
    params.zero_grads();
    f(params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for id in ids {
        let len = params.value(id).len();
        for index in 0..len {
            let original = params.value(id).data()[index];
            params.value_mut(id).data_mut()[index] = original + step;
            let plus = f(params)?;
            params.value_mut(id).data_mut()[index] = original - step;
            let minus = f(params)?;
            params.value_mut(id).data_mut()[index] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(G2gError::GradientCheck {
                    param: params.get(id).name.clone(),
                    index,
                });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let an = analytic[id.0][index];
            let err = (an - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || report.param.is_empty() {
                report.max_rel_error = err;
                report.param = params.get(id).name.clone();
                report.index = index;
                report.analytic = an;
                report.numeric = numeric;
            }
        }
    }
    // Leave the analytic gradient in place for the caller.
    params.zero_grads();
    f(params)?;
    Ok(report)
}
