//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward path, so it stays an
//! independent oracle for whatever `Tape::backward` produces.

use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::GridTensor;

/// Numerical gradient of a scalar-valued function at `at`, by central
/// differences with step `h` applied to each element in turn.
pub fn central_difference(
    mut f: impl FnMut(&GridTensor) -> Result<f64>,
    at: &GridTensor,
    h: f64,
) -> Result<GridTensor> {
    let mut grad = Vec::with_capacity(at.len());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = original - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = original;
        grad.push((plus - minus) / (2.0 * h));
    }
    GridTensor::new(at.shape().to_vec(), grad)
}

/// Relative error with the scale floored at 1 so near-zero gradients are
/// compared absolutely.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest element-wise `rel_error` between two same-shaped gradients.
pub fn max_rel_error(analytic: &GridTensor, numeric: &GridTensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Central difference for a single element of `at`.
pub fn central_difference_entry(
    f: &mut dyn FnMut(&GridTensor) -> Result<f64>,
    at: &GridTensor,
    index: usize,
    h: f64,
) -> Result<f64> {
    let mut probe = at.clone();
    let original = probe.data()[index];
    probe.data_mut()[index] = original + h;
    let plus = f(&probe)?;
    probe.data_mut()[index] = original - h;
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Sweeps every element of `at`, comparing `analytic` against central
/// differences with step `h`. Where the coarse step disagrees beyond `tol`
/// the entry is re-estimated with a 100x finer step: a ReLU-style kink
/// inside the coarse stencil makes the numeric estimate, not the analytic
/// gradient, unreliable there. Returns the largest relative error.
pub fn max_fd_error_refined(
    f: &mut dyn FnMut(&GridTensor) -> Result<f64>,
    at: &GridTensor,
    analytic: &GridTensor,
    h: f64,
    tol: f64,
) -> Result<f64> {
    assert_eq!(analytic.shape(), at.shape(), "gradient shape mismatch");
    let mut worst = 0.0f64;
    for i in 0..at.len() {
        let a = analytic.data()[i];
        let coarse = central_difference_entry(f, at, i, h)?;
        let mut err = rel_error(a, coarse);
        if err > tol {
            let fine = central_difference_entry(f, at, i, h / 100.0)?;
            err = rel_error(a, fine);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Default step for the checks in this crate.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Default acceptance threshold for `max_rel_error`.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
