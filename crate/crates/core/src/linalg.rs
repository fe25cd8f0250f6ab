//! Symmetric tridiagonal matrices and their LDLᵀ factorization.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Symmetric tridiagonal matrix stored by diagonal and first off-diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymTridiagonal {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiagonal {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Result<Self> {
        if diag.is_empty() || off.len() + 1 != diag.len() {
            return Err(invalid(format!(
                "tridiagonal shape mismatch: {} diagonal, {} off-diagonal entries",
                diag.len(),
                off.len()
            )));
        }
        Ok(Self { diag, off })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.off[i] * x[i + 1];
            }
            y[i] = acc;
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i + 1 < n {
                m[(i, i + 1)] = self.off[i];
                m[(i + 1, i)] = self.off[i];
            }
        }
        m
    }

    /// LDLᵀ factorization; fails unless the matrix is positive definite.
    pub fn factor(&self) -> Result<TridiagFactor> {
        let n = self.len();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n.saturating_sub(1)];
        d[0] = self.diag[0];
        for i in 0..n {
            if i > 0 {
                l[i - 1] = self.off[i - 1] / d[i - 1];
                d[i] = self.diag[i] - l[i - 1] * self.off[i - 1];
            }
            if !(d[i] > 0.0 && d[i].is_finite()) {
                return Err(Error::NumericalFailure(format!(
                    "tridiagonal matrix not positive definite (pivot {i} = {:.3e})",
                    d[i]
                )));
            }
        }
        Ok(TridiagFactor { d, l })
    }

    /// Diagonal of the inverse, by the two-sided recursion of the LDLᵀ
    /// factors (no dense inverse is formed).
    pub fn inverse_diagonal(&self) -> Result<Vec<f64>> {
        let n = self.len();
        let fwd = self.factor()?;
        // Backward pivots from the UDUᵀ factorization.
        let mut e = vec![0.0; n];
        e[n - 1] = self.diag[n - 1];
        for i in (0..n - 1).rev() {
            e[i] = self.diag[i] - self.off[i] * self.off[i] / e[i + 1];
        }
        // (A^{-1})_{ii} = 1 / (d_i + e_i - a_ii)
        Ok((0..n)
            .map(|i| 1.0 / (fwd.d[i] + e[i] - self.diag[i]))
            .collect())
    }
}

/// Factors `A = L D Lᵀ` with unit lower-bidiagonal `L`.
#[derive(Debug, Clone)]
pub struct TridiagFactor {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl TridiagFactor {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.d.len();
        for i in 1..n {
            x[i] -= self.l[i - 1] * x[i - 1];
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.l[i] * x[i + 1];
        }
    }

    pub fn logdet(&self) -> f64 {
        self.d.iter().map(|d| d.ln()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample(n: usize) -> SymTridiagonal {
        let diag = (0..n).map(|i| 3.0 + (i as f64 * 0.7).sin()).collect();
        let off = (0..n - 1).map(|i| -1.0 + 0.3 * (i as f64).cos()).collect();
        SymTridiagonal::new(diag, off).unwrap()
    }

    #[test]
    fn solve_matches_matvec() {
        let a = sample(17);
        let x: Vec<f64> = (0..17).map(|i| (i as f64).sqrt() - 2.0).collect();
        let b = a.matvec(&x);
        let y = a.factor().unwrap().solve(&b);
        for (u, v) in x.iter().zip(&y) {
            assert_relative_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_diagonal_matches_dense() {
        let a = sample(9);
        let inv = a.to_dense().try_inverse().unwrap();
        let diag = a.inverse_diagonal().unwrap();
        for i in 0..9 {
            assert_relative_eq!(diag[i], inv[(i, i)], max_relative = 1e-12);
        }
    }

    #[test]
    fn indefinite_rejected() {
        let a = SymTridiagonal::new(vec![1.0, 1.0], vec![2.0]).unwrap();
        assert!(a.factor().is_err());
    }
}
