//! Central finite differences over matrix-valued parameters.
//!
//! Used by the test suites to check analytic gradients against a numeric
//! probe that knows nothing about the backward pass.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Numeric gradient of `f` at `theta` by central differences with step `h`:
/// each entry is `(f(theta + h e_ij) - f(theta - h e_ij)) / (2 h)`.
///
/// `f` is called twice per entry, so cost is `2 * rows * cols` evaluations.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&Matrix) -> Result<f64>,
    theta: &Matrix,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::arg(
            "finite_difference_gradient",
            format!("step must be positive and finite, got {h}"),
        ));
    }
    let mut grad = Matrix::zeros(theta.rows(), theta.cols());
    let mut probe = theta.clone();
    for i in 0..theta.rows() {
        for j in 0..theta.cols() {
            let orig = probe.get(i, j);
            probe.set(i, j, orig + h);
            let plus = f(&probe)?;
            probe.set(i, j, orig - h);
            let minus = f(&probe)?;
            probe.set(i, j, orig);
            grad.set(i, j, (plus - minus) / (2.0 * h));
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_the_point_itself() {
        // f = 0.5 ||theta||_F^2 has gradient theta.
        let theta = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let g = finite_difference_gradient(
            &mut |m: &Matrix| Ok(0.5 * m.frob_inner(m).unwrap()),
            &theta,
            1e-5,
        )
        .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((g.get(i, j) - theta.get(i, j)).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let theta = Matrix::from_rows(&[vec![4.0, 5.0, 6.0]]).unwrap();
        let g =
            finite_difference_gradient(&mut |_: &Matrix| Ok(7.25), &theta, 1e-4).unwrap();
        assert_eq!(g.frobenius_norm(), 0.0);
    }

    #[test]
    fn entry_sum_has_unit_gradient() {
        let theta = Matrix::zeros(3, 2);
        let g = finite_difference_gradient(
            &mut |m: &Matrix| Ok(m.data().iter().sum()),
            &theta,
            1e-5,
        )
        .unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn rejects_bad_step() {
        let theta = Matrix::zeros(1, 1);
        assert!(finite_difference_gradient(&mut |_| Ok(0.0), &theta, 0.0).is_err());
        assert!(finite_difference_gradient(&mut |_| Ok(0.0), &theta, -1e-5).is_err());
        assert!(finite_difference_gradient(&mut |_| Ok(0.0), &theta, f64::NAN).is_err());
    }

    #[test]
    fn propagates_inner_errors() {
        let theta = Matrix::zeros(1, 1);
        let r = finite_difference_gradient(
            &mut |_| Err(crate::error::Error::EmptyInput { op: "probe" }),
            &theta,
            1e-5,
        );
        assert!(r.is_err());
    }
}
