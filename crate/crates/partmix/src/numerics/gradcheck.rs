//! Finite-difference gradient checker — the verification oracle behind every
//! hand-derived backward pass in this crate.

use crate::error::{Error, Result};

/// Compares `analytic_grad` against central differences of `f` at `params`.
///
/// Returns the maximum per-coordinate relative error, where the relative
/// error uses the denominator max(|analytic|, |numeric|, 1e-8).
pub fn fd_gradient_check<F>(
    mut f: F,
    params: &[f64],
    analytic_grad: &[f64],
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic_grad.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradient entries", params.len()),
            got: format!("{}", analytic_grad.len()),
        });
    }
    let mut theta = params.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let f_plus = f(&theta)?;
        theta[i] = orig - step;
        let f_minus = f(&theta)?;
        theta[i] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite("objective during gradient check"));
        }
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let analytic = analytic_grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    Ok(max_rel)
}
