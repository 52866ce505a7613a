//! Small dense linear algebra on [`Tensor`] matrices, backed by nalgebra.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.shape().len() != 2 {
        return Err(Error::shape("matrix", format!("expected rank 2, got {:?}", t.shape())));
    }
    Ok(DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data()))
}

/// Singular values in descending order.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    let a = to_matrix(m)?;
    let svd =
        a.try_svd(false, false, f64::EPSILON, 10_000).ok_or_else(|| Error::Linalg("SVD did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &Tensor) -> Result<Vec<f64>> {
    let a = to_matrix(m)?;
    if a.nrows() != a.ncols() {
        return Err(Error::shape("symmetric_eigenvalues", format!("{:?} is not square", m.shape())));
    }
    let eig = nalgebra::SymmetricEigen::try_new(a, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Linalg("symmetric eigensolver did not converge".into()))?;
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    Ok(v)
}
