//! Central finite differences for checking hand-derived adjoints.

use super::DenseArray;
use crate::error::{Error, Result};

/// Per-coordinate step rule.
#[derive(Debug, Clone, Copy)]
pub enum Step {
    /// The same `h` for every coordinate.
    Fixed(f64),
    /// `h_i = rel · max(1, |x_i|)`.
    Scaled(f64),
}

impl Step {
    fn at(self, x: f64) -> f64 {
        match self {
            Step::Fixed(h) => h,
            Step::Scaled(rel) => rel * x.abs().max(1.0),
        }
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &DenseArray, step: Step) -> Result<DenseArray>
where
    F: FnMut(&DenseArray) -> f64,
{
    let mut probe = x.clone();
    let mut grad = DenseArray::zeros(x.shape());
    for i in 0..x.len() {
        let xi = x.data()[i];
        let h = step.at(xi);
        probe.data_mut()[i] = xi + h;
        let plus = f(&probe);
        probe.data_mut()[i] = xi - h;
        let minus = f(&probe);
        probe.data_mut()[i] = xi;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective evaluated at coordinate {i} (f+ = {plus}, f- = {minus})"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Max-norm relative disagreement between an analytic gradient and its
/// finite-difference estimate. Arrays whose entries are all below `floor`
/// in magnitude are compared absolutely against `floor`.
pub fn grad_rel_err(analytic: &DenseArray, numeric: &DenseArray, floor: f64) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs()).max(floor);
    analytic.max_abs_diff(numeric) / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = DenseArray::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|v| v.data().iter().map(|a| a * a).sum(), &x, Step::Fixed(1e-5))
            .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = DenseArray::full(&[3, 2], 0.7);
        let g = finite_diff_grad(|_| 4.2, &x, Step::Scaled(1e-4)).unwrap();
        assert_eq!(g, DenseArray::zeros(&[3, 2]));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = DenseArray::full(&[1], 0.0);
        let err = finite_diff_grad(|v| 1.0 / v.data()[0].abs().max(0.0) - 1e300 * 1e300, &x, Step::Fixed(1e-3));
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
