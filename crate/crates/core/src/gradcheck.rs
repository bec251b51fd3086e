//! Finite-difference gradient checking.
//!
//! Used by the test and acceptance suites to validate every backward rule
//! against central differences of the forward computation. The check only
//! ever calls the forward path, so it stays independent of the gradients it
//! verifies.

use crate::error::Result;
use crate::tensor::Tensor;

/// Step size for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central finite-difference gradient of a scalar function at `x`.
///
/// `f` receives a candidate tensor and returns the scalar objective.
pub fn finite_difference<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Largest relative deviation between two gradients.
///
/// Per element: `|a - b| / max(|a|, |b|, floor)` with a small floor so that
/// a pair of near-zero entries compares in absolute terms.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes must match");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Assert that an autodiff gradient matches central differences.
pub fn check_gradient<F>(f: F, x: &Tensor, autodiff: &Tensor, rel_tol: f64) -> Result<()>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let fd = finite_difference(f, x, DEFAULT_STEP)?;
    let err = max_relative_error(autodiff, &fd, 1e-4);
    if err > rel_tol {
        return Err(crate::error::Error::Numeric(format!(
            "gradient check failed: max relative error {err:.3e} exceeds {rel_tol:.1e}"
        )));
    }
    Ok(())
}
