//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::scalar::Real;

/// Eigenpairs of a symmetric matrix, sorted by non-increasing eigenvalue.
pub(crate) struct SortedEigen<T: Real> {
    pub values: DVector<T>,
    /// Columns are unit eigenvectors matching `values`.
    pub vectors: DMatrix<T>,
}

pub(crate) fn symmetric_eigen_desc<T: Real>(m: DMatrix<T>) -> SortedEigen<T> {
    let dim = m.nrows();
    if dim == 0 {
        return SortedEigen {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        };
    }
    // Symmetrise to remove round-off asymmetry from assembly.
    let sym = (&m + m.transpose()) * T::lit(0.5);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(dim, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(dim, dim);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    SortedEigen { values, vectors }
}

/// Flips each column so that its entry of largest magnitude is positive.
///
/// Ties in magnitude resolve to the first such entry. Returns the applied signs.
pub(crate) fn fix_signs<T: Real>(m: &mut DMatrix<T>) -> Vec<T> {
    let mut signs = Vec::with_capacity(m.ncols());
    for mut col in m.column_iter_mut() {
        let mut best = 0;
        let mut best_abs = T::zero();
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if !col.is_empty() && col[best] < T::zero() {
            col.neg_mut();
            signs.push(-T::one());
        } else {
            signs.push(T::one());
        }
    }
    signs
}

/// Number of leading eigenvalues above the rank threshold.
pub(crate) fn numerical_rank<T: Real>(values: &DVector<T>, scale: T) -> usize {
    let tol = crate::scalar::rank_tolerance::<T>() * scale.max(T::zero());
    values.iter().take_while(|&&v| v > tol && v > T::zero()).count()
}
