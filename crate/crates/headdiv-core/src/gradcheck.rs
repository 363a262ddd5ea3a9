//! Central finite-difference gradient oracle.
//!
//! Lives in the library (not test code) so every downstream module can
//! check its analytic backward pass against the same independent estimate.

use crate::matrix::Matrix;

/// Central-difference gradient of a scalar-valued function of a matrix:
/// `(f(x + hE) - f(x - hE)) / (2h)` per entry.
pub fn fd_gradient(f: impl Fn(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error between two same-shaped matrices:
/// max-norm of the difference over the larger max-norm (floored to avoid
/// division by zero when both are zero).
pub fn matrix_rel_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "matrix_rel_error: shape mismatch");
    let mut diff: f64 = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        diff = diff.max((x - y).abs());
    }
    diff / a.max_abs().max(b.max_abs()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn fd_of_entry_sum_is_all_ones() {
        let x = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.3 - 1.0);
        let grad = fd_gradient(|m| m.sum(), &x, 1e-6);
        for &g in grad.data() {
            assert!((g - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_of_half_squared_norm_is_x() {
        let mut rng = SeededRng::from_seed(9);
        let x = Matrix::from_fn(4, 3, |_, _| rng.uniform(-1.0, 1.0));
        let grad = fd_gradient(
            |m| 0.5 * m.data().iter().map(|v| v * v).sum::<f64>(),
            &x,
            1e-6,
        );
        assert!(matrix_rel_error(&grad, &x) <= 1e-8);
    }

    #[test]
    fn fd_matches_softmax_vjp() {
        let mut rng = SeededRng::from_seed(10);
        let x = Matrix::from_fn(2, 4, |_, _| rng.uniform(-1.0, 1.0));
        let g = Matrix::from_fn(2, 4, |_, _| rng.uniform(-1.0, 1.0));
        let fd = fd_gradient(|m| m.row_softmax().dot(&g).unwrap(), &x, 1e-6);
        let s = x.row_softmax();
        let analytic = crate::matrix::row_softmax_vjp(&s, &g).unwrap();
        assert!(matrix_rel_error(&fd, &analytic) <= 1e-5);
    }
}
