//! Central-difference gradient checking.

use crate::error::{Error, Result};

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` at `x` and returns
/// the largest per-coordinate relative error.
pub fn grad_check<F>(mut f: F, analytic: &[f64], x: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid("h", "step must be > 0"));
    }
    if analytic.len() != x.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} analytic components for {} coordinates", analytic.len(), x.len()),
        ));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite("grad_check evaluation"));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let e = rel_error(analytic[i], numeric);
        worst = worst.max(e);
    }
    Ok(worst)
}
