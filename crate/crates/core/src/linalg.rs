//! Small dense helpers. Decompositions run on dynamic matrices so they can
//! be called from code generic over the spatial dimension.

use nalgebra::{DMatrix, DVector, SMatrix};

pub fn to_dynamic<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

pub fn to_static<const R: usize, const C: usize>(m: &DMatrix<f64>) -> SMatrix<f64, R, C> {
    SMatrix::<f64, R, C>::from_column_slice(m.as_slice())
}

pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().min()
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// nonincreasing order; column `i` of the returned matrix is eigenvector `i`.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Flips each column so its largest-magnitude entry is positive (first such
/// entry on ties).
pub fn canonical_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0usize;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() + 1e-12 {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Largest principal angle (radians) between the column spans of `a` and `b`.
/// Columns need not be orthonormal.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = (qa.transpose() * qb).singular_values();
    let smallest = s.min().clamp(-1.0, 1.0);
    smallest.acos()
}
