//! Dense and sparse factorizations used by the local and global solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use nalgebra_sparse::factorization::CscCholesky;

use crate::error::{Error, Result};
use crate::fem::SparseSymMatrix;
use crate::scalar::Scalar;

/// Sparse Cholesky factorization of an SPD matrix; the symbolic analysis is
/// reused by [`SparseCholesky::refactor`].
#[derive(Debug, Clone)]
pub struct SparseCholesky<T: Scalar> {
    factor: CscCholesky<T>,
    dim: usize,
}

impl<T: Scalar> SparseCholesky<T> {
    pub fn new(matrix: &SparseSymMatrix<T>, context: &str) -> Result<Self> {
        let factor = CscCholesky::factor(matrix.csc()).map_err(|_| Error::NotPositiveDefinite(context.to_string()))?;
        Ok(Self {
            factor,
            dim: matrix.dim(),
        })
    }

    /// Numerical refactorization for a matrix with the original sparsity pattern.
    pub fn refactor(&mut self, matrix: &SparseSymMatrix<T>, context: &str) -> Result<()> {
        self.factor
            .refactor(matrix.csc().values())
            .map_err(|_| Error::NotPositiveDefinite(context.to_string()))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve(&self, rhs: &DVector<T>) -> DVector<T> {
        let x = self.factor.solve(rhs);
        DVector::from_column_slice(x.as_slice())
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<T>) -> DMatrix<T> {
        self.factor.solve(rhs)
    }
}

pub fn cholesky<T: Scalar>(m: &DMatrix<T>, context: &str) -> Result<Cholesky<T, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(context.to_string()))
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sorted_symmetric_eigen<T: Scalar>(m: DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap_or(std::cmp::Ordering::Equal));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    (values, vectors)
}

/// Dense generalized symmetric-definite eigenproblem `A x = lambda B x`.
///
/// Returns all eigenpairs, eigenvalues ascending, eigenvectors `B`-orthonormal
/// and sign-normalized so their largest-magnitude entry is positive.
pub fn generalized_eigen<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>, context: &str) -> Result<(DVector<T>, DMatrix<T>)> {
    if a.shape() != b.shape() || !a.is_square() {
        return Err(Error::DimensionMismatch {
            context: "generalized eigenproblem",
            expected: a.nrows(),
            actual: b.nrows(),
        });
    }
    let chol = cholesky(b, context)?;
    let l = chol.l();
    // C = L^-1 A L^-T
    let y = l.solve_lower_triangular(a).ok_or_else(|| Error::NotPositiveDefinite(context.to_string()))?;
    let c = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite(context.to_string()))?;
    let c = (&c + c.transpose()) * T::lit(0.5);
    let (values, w) = sorted_symmetric_eigen(c);
    let mut vectors = l
        .transpose()
        .solve_upper_triangular(&w)
        .ok_or_else(|| Error::NotPositiveDefinite(context.to_string()))?;
    normalize_signs(&mut vectors);
    Ok((values, vectors))
}

/// Flips each column so that its largest-magnitude entry is positive.
pub fn normalize_signs<T: Scalar>(vectors: &mut DMatrix<T>) {
    for mut col in vectors.column_iter_mut() {
        let (imax, _) = col.iter().enumerate().fold((0, T::zero()), |(bi, bv), (i, &v)| {
            if v.abs() > bv {
                (i, v.abs())
            } else {
                (bi, bv)
            }
        });
        if col[imax] < T::zero() {
            col.neg_mut();
        }
    }
}

/// Orthonormal basis of the orthogonal complement of `span(columns)`.
pub fn orthogonal_complement<T: Scalar>(columns: &DMatrix<T>) -> DMatrix<T> {
    let n = columns.nrows();
    if columns.ncols() == 0 {
        return DMatrix::identity(n, n);
    }
    let q = columns.clone().qr().q();
    let projector = DMatrix::<T>::identity(n, n) - &q * q.transpose();
    let (values, vectors) = sorted_symmetric_eigen(projector);
    let half = T::lit(0.5);
    let keep: Vec<_> = (0..n).filter(|&i| values[i] > half).map(|i| vectors.column(i).into_owned()).collect();
    if keep.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&keep)
    }
}

/// Largest singular value.
pub fn spectral_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    m.clone().singular_values().iter().fold(T::zero(), |acc, &s| acc.max(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble_mass;
    use crate::grid::FineGrid;

    #[test]
    fn generalized_eigen_residuals() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let b = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 2.0, 0.5, 0.0, 0.5, 2.0]);
        let (vals, vecs) = generalized_eigen(&a, &b, "test").unwrap();
        assert!(vals[0] <= vals[1] && vals[1] <= vals[2]);
        for k in 0..3 {
            let x = vecs.column(k);
            let r = &a * x - &b * x * vals[k];
            assert!(r.amax() < 1e-12);
        }
        let gram = vecs.transpose() * &b * &vecs;
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn complement_is_orthogonal() {
        let c = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 2.0, 0.0, 0.0]);
        let z = orthogonal_complement(&c);
        assert_eq!(z.ncols(), 2);
        assert!((c.transpose() * &z).amax() < 1e-12);
        assert!((z.transpose() * &z - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn sparse_cholesky_solves() {
        let g = FineGrid::<f64>::new(5).unwrap();
        let m = assemble_mass(&g, None).unwrap();
        let chol = SparseCholesky::new(&m, "mass").unwrap();
        let b = DVector::from_fn(m.dim(), |i, _| (i as f64).sin());
        let x = chol.solve(&b);
        assert!((m.mul_vec(&x) - b).amax() < 1e-10);
    }
}
