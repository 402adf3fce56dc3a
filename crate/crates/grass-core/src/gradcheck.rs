//! Central finite differences, the independent gradient oracle.
//!
//! Deliberately knows nothing about the tape: it evaluates a black-box
//! scalar function at perturbed inputs, so it stays a valid check no
//! matter what the backward pass does.

use alloc::vec::Vec;

use crate::element::Element;
use crate::error::CoreError;
use crate::tensor::Tensor;
use crate::Result;

/// Central-difference gradient estimate of `f` at `theta` with step `h`:
/// `(f(theta + h e_i) - f(theta - h e_i)) / (2h)` per coordinate.
pub fn finite_difference_gradient<E, F>(f: F, theta: &Tensor<E>, h: f64) -> Result<Tensor<E>>
where
    E: Element,
    F: Fn(&Tensor<E>) -> Result<E>,
{
    let step = E::from_f64(h);
    let two_h = E::from_f64(2.0 * h);
    let mut grad = Vec::with_capacity(theta.numel());
    let mut probe = theta.clone();
    for i in 0..theta.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        let g = (plus - minus) / two_h;
        if !g.is_finite() {
            return Err(CoreError::numerical("finite_difference_gradient"));
        }
        grad.push(g);
    }
    Tensor::new(theta.shape().to_vec(), grad)
}

/// Largest relative error between an analytic gradient and its
/// finite-difference estimate, with an absolute floor so near-zero
/// coordinates do not blow the ratio up.
pub fn max_relative_error<E: Element>(analytic: &[E], estimate: &[E]) -> f64 {
    let mut worst = 0.0f64;
    for (&a, &e) in analytic.iter().zip(estimate) {
        let (a, e) = (a.to_f64(), e.to_f64());
        let denom = a.abs().max(e.abs()).max(1e-8);
        let rel = (a - e).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quadratic_derivative() {
        let theta = Tensor::new(vec![1], vec![3.0f64]).unwrap();
        let grad = finite_difference_gradient(
            |t: &Tensor<f64>| Ok(t.data()[0] * t.data()[0]),
            &theta,
            1e-5,
        )
        .unwrap();
        assert!((grad.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let theta = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let grad =
            finite_difference_gradient(|_: &Tensor<f64>| Ok(7.25f64), &theta, 1e-5).unwrap();
        assert_eq!(grad.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn exponential_derivative_at_zero() {
        let theta = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let grad = finite_difference_gradient(
            |t: &Tensor<f64>| Ok(libm::exp(t.data()[0])),
            &theta,
            1e-5,
        )
        .unwrap();
        assert!((grad.data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let theta = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let res = finite_difference_gradient(
            |t: &Tensor<f64>| Ok(1.0 / t.data()[0]),
            &theta,
            0.0,
        );
        assert!(res.is_err());
    }
}
