//! Symmetric matrices stored either densely or as a diagonal.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FedGviError, Result};

/// Relative eigenvalue floor below which a matrix is not treated as positive definite.
pub const PD_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum SymMat {
    Dense(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

impl SymMat {
    /// Builds a dense symmetric matrix, replacing `m` by `(m + mᵀ)/2`.
    pub fn dense(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(FedGviError::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(SymMat::Dense(sym))
    }

    pub fn diagonal(d: DVector<f64>) -> Self {
        SymMat::Diagonal(d)
    }

    pub fn zeros(dim: usize, diagonal: bool) -> Self {
        if diagonal {
            SymMat::Diagonal(DVector::zeros(dim))
        } else {
            SymMat::Dense(DMatrix::zeros(dim, dim))
        }
    }

    pub fn identity(dim: usize) -> Self {
        SymMat::Diagonal(DVector::from_element(dim, 1.0))
    }

    pub fn dim(&self) -> usize {
        match self {
            SymMat::Dense(m) => m.nrows(),
            SymMat::Diagonal(d) => d.len(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, SymMat::Diagonal(_))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SymMat::Dense(m) => m.clone(),
            SymMat::Diagonal(d) => DMatrix::from_diagonal(d),
        }
    }

    pub fn diag(&self) -> DVector<f64> {
        match self {
            SymMat::Dense(m) => m.diagonal(),
            SymMat::Diagonal(d) => d.clone(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            SymMat::Dense(m) => m[(i, j)],
            SymMat::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
        }
    }

    fn combine(&self, other: &SymMat, f: impl Fn(f64, f64) -> f64) -> Result<SymMat> {
        if self.dim() != other.dim() {
            return Err(FedGviError::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(match (self, other) {
            (SymMat::Diagonal(a), SymMat::Diagonal(b)) => SymMat::Diagonal(a.zip_map(b, f)),
            _ => SymMat::Dense(self.to_dense().zip_map(&other.to_dense(), f)),
        })
    }

    pub fn add(&self, other: &SymMat) -> Result<SymMat> {
        self.combine(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &SymMat) -> Result<SymMat> {
        self.combine(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> SymMat {
        match self {
            SymMat::Dense(m) => SymMat::Dense(m * s),
            SymMat::Diagonal(d) => SymMat::Diagonal(d * s),
        }
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SymMat::Dense(m) => m * v,
            SymMat::Diagonal(d) => d.component_mul(v),
        }
    }

    /// `vᵀ M v`
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.mul_vec(v))
    }

    /// `tr(A B)` for symmetric `A`, `B`.
    pub fn trace_product(&self, other: &SymMat) -> f64 {
        match (self, other) {
            (SymMat::Diagonal(a), SymMat::Diagonal(b)) => a.dot(b),
            (SymMat::Diagonal(a), SymMat::Dense(b)) | (SymMat::Dense(b), SymMat::Diagonal(a)) => {
                a.dot(&b.diagonal())
            }
            (SymMat::Dense(a), SymMat::Dense(b)) => a.component_mul(b).sum(),
        }
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        match self {
            SymMat::Diagonal(d) => d.clone(),
            SymMat::Dense(m) => SymmetricEigen::new(m.clone()).eigenvalues,
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    /// Positive definite with smallest eigenvalue above `PD_TOLERANCE` times the largest.
    pub fn is_positive_definite(&self) -> bool {
        let ev = self.eigenvalues();
        if ev.is_empty() {
            return true;
        }
        let max = ev.max();
        let min = ev.min();
        max > 0.0 && min > PD_TOLERANCE * max && ev.iter().all(|e| e.is_finite())
    }

    pub fn inverse(&self) -> Result<SymMat> {
        match self {
            SymMat::Diagonal(d) => {
                if d.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    return Err(FedGviError::NotPositiveDefinite);
                }
                Ok(SymMat::Diagonal(d.map(|x| 1.0 / x)))
            }
            SymMat::Dense(m) => {
                let chol = m
                    .clone()
                    .cholesky()
                    .ok_or(FedGviError::NotPositiveDefinite)?;
                SymMat::dense(chol.inverse())
            }
        }
    }

    /// Solves `M x = b` for positive-definite `M`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            SymMat::Diagonal(d) => {
                if d.iter().any(|&x| !(x > 0.0)) {
                    return Err(FedGviError::NotPositiveDefinite);
                }
                Ok(b.component_div(d))
            }
            SymMat::Dense(m) => {
                let chol = m
                    .clone()
                    .cholesky()
                    .ok_or(FedGviError::NotPositiveDefinite)?;
                Ok(chol.solve(b))
            }
        }
    }

    /// `log det M` for positive-definite `M`.
    pub fn log_det(&self) -> Result<f64> {
        match self {
            SymMat::Diagonal(d) => {
                if d.iter().any(|&x| !(x > 0.0)) {
                    return Err(FedGviError::NotPositiveDefinite);
                }
                Ok(d.iter().map(|x| x.ln()).sum())
            }
            SymMat::Dense(m) => {
                let chol = m
                    .clone()
                    .cholesky()
                    .ok_or(FedGviError::NotPositiveDefinite)?;
                Ok(2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
            }
        }
    }

    /// Lower Cholesky factor.
    pub fn cholesky_factor(&self) -> Result<DMatrix<f64>> {
        match self {
            SymMat::Diagonal(d) => {
                if d.iter().any(|&x| !(x > 0.0)) {
                    return Err(FedGviError::NotPositiveDefinite);
                }
                Ok(DMatrix::from_diagonal(&d.map(f64::sqrt)))
            }
            SymMat::Dense(m) => Ok(m
                .clone()
                .cholesky()
                .ok_or(FedGviError::NotPositiveDefinite)?
                .l()),
        }
    }

    /// Row-major flattening of the dense form.
    pub fn to_row_major(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                out.push(self.get(i, j));
            }
        }
        out
    }

    pub fn from_row_major(dim: usize, values: &[f64]) -> Result<SymMat> {
        if values.len() != dim * dim {
            return Err(FedGviError::DimensionMismatch {
                expected: dim * dim,
                found: values.len(),
            });
        }
        SymMat::dense(DMatrix::from_row_slice(dim, dim, values))
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            SymMat::Dense(m) => m.amax(),
            SymMat::Diagonal(d) => d.amax(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_construction_symmetrises() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let s = SymMat::dense(m).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
        assert_eq!(s.get(1, 0), 1.0);
    }

    #[test]
    fn positive_definiteness_threshold() {
        assert!(SymMat::diagonal(DVector::from_vec(vec![1.0, 1e-6])).is_positive_definite());
        assert!(!SymMat::diagonal(DVector::from_vec(vec![1.0, 1e-13])).is_positive_definite());
        assert!(!SymMat::diagonal(DVector::from_vec(vec![1.0, -1.0])).is_positive_definite());
    }

    #[test]
    fn diagonal_and_dense_agree() {
        let d = DVector::from_vec(vec![2.0, 4.0, 0.5]);
        let diag = SymMat::diagonal(d.clone());
        let dense = SymMat::dense(DMatrix::from_diagonal(&d)).unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert!((diag.log_det().unwrap() - dense.log_det().unwrap()).abs() < 1e-12);
        assert!((diag.solve(&v).unwrap() - dense.solve(&v).unwrap()).amax() < 1e-12);
        assert!((diag.quad_form(&v) - dense.quad_form(&v)).abs() < 1e-12);
    }
}
