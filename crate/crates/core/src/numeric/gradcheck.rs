//! Central finite differences for checking analytic gradients.
//!
//! Deliberately independent of the tape: the function under test is
//! evaluated as a black box on perturbed copies of its inputs.

use super::tensor::Tensor;

/// Step used by every gradient check in this crate.
pub const FD_STEP: f64 = 1e-5;

/// Entries whose gradients are both smaller than this are compared
/// absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numerical_grad<F>(mut f: F, inputs: &[Tensor], which: usize, step: f64) -> Tensor
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].numel() {
        let orig = inputs[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let plus = f(&work);
        work[which].data_mut()[i] = orig - step;
        let minus = f(&work);
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest entrywise `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}
