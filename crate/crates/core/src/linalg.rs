//! Dense symmetric positive-definite solves for the edit normal equations.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Array2<f64>,
    /// Pivots dropped as linearly dependent (semidefinite factorization).
    skipped: Vec<bool>,
}

impl Cholesky {
    /// Fails with a solver error when `a` is not numerically positive
    /// definite.
    pub fn factor(a: ArrayView2<'_, f64>) -> Result<Self> {
        Self::factor_impl(a, false)
    }

    /// Factorization of a positive-semidefinite matrix: pivots that are
    /// numerically dependent on earlier columns are skipped, and the
    /// matching solution entries are zero. Solutions are exact whenever the
    /// right-hand side lies in the range of `a`.
    pub fn factor_semidefinite(a: ArrayView2<'_, f64>) -> Result<Self> {
        Self::factor_impl(a, true)
    }

    fn factor_impl(a: ArrayView2<'_, f64>, skip: bool) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Solver(format!("matrix is {}x{}, not square", n, a.ncols())));
        }
        let mut l = Array2::<f64>::zeros((n, n));
        let mut skipped = vec![false; n];
        for j in 0..n {
            let mut diag = a[[j, j]];
            for k in 0..j {
                diag -= l[[j, k]] * l[[j, k]];
            }
            // Pivot relative to its own diagonal entry: a collinearity test.
            if !(diag > a[[j, j]].abs() * 1e-10 && diag > 0.0) {
                if skip && diag.is_finite() && diag > -a[[j, j]].abs() * 1e-6 {
                    skipped[j] = true;
                    continue;
                }
                return Err(Error::Solver(format!(
                    "system is singular or indefinite at pivot {j} (value {diag:e})"
                )));
            }
            let d = diag.sqrt();
            l[[j, j]] = d;
            for i in j + 1..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / d;
            }
        }
        Ok(Self { l, skipped })
    }

    /// Solves `A X = B` for every column of `b`.
    pub fn solve(&self, b: &Array2<f64>) -> Array2<f64> {
        let n = self.l.nrows();
        let mut x = b.clone();
        for col in 0..x.ncols() {
            for i in 0..n {
                if self.skipped[i] {
                    x[[i, col]] = 0.0;
                    continue;
                }
                let mut s = x[[i, col]];
                for k in 0..i {
                    s -= self.l[[i, k]] * x[[k, col]];
                }
                x[[i, col]] = s / self.l[[i, i]];
            }
            for i in (0..n).rev() {
                if self.skipped[i] {
                    continue;
                }
                let mut s = x[[i, col]];
                for k in i + 1..n {
                    s -= self.l[[k, i]] * x[[k, col]];
                }
                x[[i, col]] = s / self.l[[i, i]];
            }
        }
        x
    }
}

/// Frobenius norm.
pub fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_spd_system() {
        let a = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let b = array![[1.0, 0.0], [2.0, 1.0], [3.0, -1.0]];
        let x = Cholesky::factor(a.view()).unwrap().solve(&b);
        let resid = a.dot(&x) - &b;
        assert!(frobenius(&resid) < 1e-12);
    }

    #[test]
    fn semidefinite_factor_solves_consistent_singular_systems() {
        let k = array![[1.0, 2.0, 2.0, 0.0], [0.0, 1.0, 1.0, 3.0]];
        let a = k.t().dot(&k);
        let b = k.t().dot(&array![[1.0], [2.0]]);
        let x = Cholesky::factor_semidefinite(a.view()).unwrap().solve(&b);
        assert!(frobenius(&(a.dot(&x) - &b)) < 1e-10);
        assert!(Cholesky::factor(a.view()).is_err());
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(matches!(Cholesky::factor(a.view()), Err(Error::Solver(_))));
    }
}
