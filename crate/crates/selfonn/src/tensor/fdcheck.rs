//! Central finite differences, the verification oracle for every backward
//! rule in the crate. Kept independent of the tape on purpose: it only ever
//! calls the supplied closure on perturbed copies of the input.

use crate::tensor::Tensor;

/// Central-difference gradient estimate of a scalar function,
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)` per element.
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    eps: f64,
) -> Tensor {
    assert!(eps > 0.0, "eps must be positive");
    let mut work = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + eps;
        let plus = f(&work);
        work.data_mut()[i] = orig - eps;
        let minus = f(&work);
        work.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("finite differences produced non-finite values")
}

/// Relative error with a floor so that near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest elementwise relative error between two gradient buffers.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
