use super::Matrix;
use crate::error::{Error, Result};

/// Central-difference gradient of `loss` at `at`, one coordinate at a time.
///
/// `loss` must be deterministic; for stochastic objectives freeze the noise
/// realization before calling.
pub fn finite_diff_grad<F>(mut loss: F, at: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.len() {
        let x = at.as_slice()[i];
        probe.as_mut_slice()[i] = x + h;
        let plus = loss(&probe);
        probe.as_mut_slice()[i] = x - h;
        let minus = loss(&probe);
        probe.as_mut_slice()[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: "finite-difference loss evaluation",
                index: i,
            });
        }
        grad.as_mut_slice()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Symmetric relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
