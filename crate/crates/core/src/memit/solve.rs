//! Closed-form least-squares update of one MLP output matrix.
//!
//! With preexisting keys `K0` (covariance `C0 = K0^T K0`), new keys `K1` and
//! the residuals `R1` the new keys should add to the MLP output, the update
//! minimizes
//!
//! ```text
//! J(D) = lambda * ||K0 D||^2 + ||K1 D - R1||^2
//! ```
//!
//! whose normal equations are `(lambda C0 + K1^T K1) D = K1^T R1`.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{frobenius, Cholesky};

/// Relative gradient norm accepted as stationary.
pub const STATIONARITY_TOL: f64 = 1e-5;

pub fn edit_objective(k1: &Array2<f64>, r1: &Array2<f64>, c0: &Array2<f64>, lambda: f64, delta: &Array2<f64>) -> f64 {
    let keep = (delta * &c0.dot(delta)).sum() * lambda;
    let fit = k1.dot(delta) - r1;
    keep + fit.iter().map(|x| x * x).sum::<f64>()
}

pub fn objective_gradient(
    k1: &Array2<f64>,
    r1: &Array2<f64>,
    c0: &Array2<f64>,
    lambda: f64,
    delta: &Array2<f64>,
) -> Array2<f64> {
    (c0.dot(delta) * lambda + k1.t().dot(&(k1.dot(delta) - r1))) * 2.0
}

/// `||grad J(D)|| / (2 ||K1^T R1||)`, the scale-free stationarity measure.
pub fn stationarity(k1: &Array2<f64>, r1: &Array2<f64>, c0: &Array2<f64>, lambda: f64, delta: &Array2<f64>) -> f64 {
    let scale = 2.0 * frobenius(&k1.t().dot(r1));
    if scale == 0.0 {
        return frobenius(&objective_gradient(k1, r1, c0, lambda, delta));
    }
    frobenius(&objective_gradient(k1, r1, c0, lambda, delta)) / scale
}

/// Solves the normal equations and verifies stationarity of the result.
pub fn solve_delta(k1: &Array2<f64>, r1: &Array2<f64>, c0: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    let (u, d_ff) = k1.dim();
    if r1.nrows() != u || c0.dim() != (d_ff, d_ff) {
        return Err(Error::Input(format!(
            "shape mismatch: keys {:?}, residuals {:?}, covariance {:?}",
            k1.dim(),
            r1.dim(),
            c0.dim()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("covariance scale must be finite and >= 0, got {lambda}")));
    }
    if r1.iter().all(|&x| x == 0.0) {
        return Ok(Array2::zeros((d_ff, r1.ncols())));
    }
    let a = c0 * lambda + k1.t().dot(k1);
    // Units no key ever activates have all-zero rows in the system; their
    // update rows cannot change any output and stay zero.
    let max_diag = a.diag().iter().cloned().fold(0.0f64, f64::max);
    let active: Vec<usize> = (0..d_ff).filter(|&j| a[[j, j]] > max_diag * 1e-12).collect();
    let a = a.select(Axis(0), &active).select(Axis(1), &active);
    let factor = if lambda > 0.0 { Cholesky::factor_semidefinite } else { Cholesky::factor };
    let chol = factor(a.view()).map_err(|e| {
        Error::Solver(if lambda == 0.0 {
            format!("{e}; the unregularized system is singular, use a covariance scale > 0")
        } else {
            e.to_string()
        })
    })?;
    let rhs = k1.t().dot(r1).select(Axis(0), &active);
    let solved = chol.solve(&rhs);
    let mut delta = Array2::zeros((d_ff, r1.ncols()));
    for (i, &j) in active.iter().enumerate() {
        delta.row_mut(j).assign(&solved.row(i));
    }
    let s = stationarity(k1, r1, c0, lambda, &delta);
    if !(s < STATIONARITY_TOL) {
        return Err(Error::Solver(format!("solution is not stationary (relative gradient {s:e})")));
    }
    Ok(delta)
}
