//! Finite-difference verification of analytic gradients.
//!
//! The caller runs its own forward/backward pass, leaves the analytic
//! gradients in the [`ParamStore`], and hands over a loss closure. Each
//! parameter element is then perturbed by `±epsilon` and the central
//! difference `(L+ - L-) / 2eps` is compared against the stored gradient.
//! Everything runs in `f64`; perturbations are restored bit-exactly.

use super::{ParamStore, TensorError};

/// Outcome of a [`grad_check`] sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across every parameter element.
    pub max_relative_error: f64,
    /// Path of the parameter holding the worst element.
    pub worst_parameter_path: String,
    /// Flat element index of the worst element within that parameter.
    pub worst_index: usize,
    /// Perturbation size used.
    pub epsilon: f64,
}

/// Compares the analytic gradients stored in `params` against central
/// finite differences of `loss`.
///
/// The relative error for one element with analytic value `a` and numeric
/// value `n` is `|a - n| / max(|a|, |n|, 1e-8)`; the report carries the
/// worst element. A non-finite loss at any perturbation aborts with an
/// error naming the parameter and element being perturbed.
pub fn grad_check<F>(
    params: &mut ParamStore,
    epsilon: f64,
    mut loss: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&ParamStore) -> Result<f64, TensorError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let paths: Vec<String> = params.paths().cloned().collect();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter_path: String::new(),
        worst_index: 0,
        epsilon,
    };
    for path in paths {
        let n_elems = params.get(&path)?.value.len();
        for idx in 0..n_elems {
            let original = params.get(&path)?.value.data()[idx];
            params.get_mut(&path)?.value.data_mut()[idx] = original + epsilon;
            let plus = loss(params)?;
            params.get_mut(&path)?.value.data_mut()[idx] = original - epsilon;
            let minus = loss(params)?;
            // Bit-exact restore: we wrote new values, now put the original
            // representation back untouched.
            params.get_mut(&path)?.value.data_mut()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFiniteLoss {
                    path: path.clone(),
                    index: idx,
                });
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = params.get(&path)?.grad.data()[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_parameter_path = path.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
