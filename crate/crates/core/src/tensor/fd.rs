//! Central-difference gradient oracle.
//!
//! Independent of the tape: perturbs one coordinate at a time and re-runs the
//! forward function, so it can verify any backward rule in this crate.

use super::Tensor;
use crate::error::{GodeError, Result};
use crate::scalar::Scalar;

/// Gradient of a deterministic scalar-valued function by central differences:
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)` per coordinate.
///
/// `x` is restored to its original values before returning. Non-finite
/// function output is an error.
pub fn finite_difference_grad<S: Scalar>(
    f: &mut dyn FnMut(&Tensor<S>) -> Result<f64>,
    x: &Tensor<S>,
    eps: f64,
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(GodeError::Config(format!(
            "finite differences need eps > 0, got {eps}"
        )));
    }
    let original = x.to_vec();
    let step = S::from_f64(eps);
    let mut grad = vec![0.0f64; original.len()];
    for i in 0..original.len() {
        let mut plus = original.clone();
        plus[i] += step;
        x.set_data(&plus);
        let fp = f(x)?;
        let mut minus = original.clone();
        minus[i] -= step;
        x.set_data(&minus);
        let fm = f(x)?;
        x.set_data(&original);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GodeError::NonFinite {
                op: "finite_difference_grad",
            });
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Relative error with an absolute floor, used by every gradient check in
/// this crate: true relative error above the floor, absolute below it (keeps
/// central-difference noise on exactly-zero gradients from registering).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_of_squares() {
        let x = Tensor::param(vec![2], vec![1.0f64, -1.0]).unwrap();
        let g = finite_difference_grad(&mut |t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-4)
            .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] + 2.0).abs() < 1e-8);
        // x restored
        assert_eq!(x.to_vec(), vec![1.0, -1.0]);
    }

    #[test]
    fn gradient_of_exp_at_zero() {
        let x = Tensor::param(vec![1], vec![0.0f64]).unwrap();
        let g = finite_difference_grad(
            &mut |t| Ok(t.data().iter().map(|v: &f64| v.exp()).sum()),
            &x,
            1e-4,
        )
        .unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::param(vec![1], vec![0.0f64]).unwrap();
        assert!(finite_difference_grad(&mut |_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::param(vec![1], vec![0.0f64]).unwrap();
        assert!(finite_difference_grad(&mut |_| Ok(f64::NAN), &x, 1e-4).is_err());
    }
}
