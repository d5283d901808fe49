//! Small dense linear-algebra helpers shared across modules; SVD-based rank
//! tests and ridge-guarded least squares are delegated to nalgebra.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};

pub fn to_na(m: &ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Singular values in descending order.
pub fn singular_values(m: &ArrayView2<f64>) -> Vec<f64> {
    let na = to_na(m);
    let mut sv: Vec<f64> = na.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Numerical rank: the number of singular values above `tol * sigma_max`.
/// Returns the rank together with all singular values (descending).
pub fn rank_with_tol(m: &ArrayView2<f64>, tol: f64) -> (usize, Vec<f64>) {
    let sv = singular_values(m);
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return (0, sv);
    }
    let rank = sv.iter().filter(|&&s| s > tol * smax).count();
    (rank, sv)
}

pub fn inverse(m: &ArrayView2<f64>) -> Option<Array2<f64>> {
    to_na(m).try_inverse().map(|inv| from_na(&inv))
}

pub fn determinant(m: &ArrayView2<f64>) -> f64 {
    to_na(m).determinant()
}

/// Solves the normal equations `(X^T X / n) b = X^T y / n` by Cholesky,
/// falling back to a ridge term `lambda I` when the Gram matrix is not
/// positive definite.
pub fn solve_normal_equations(gram: &Array2<f64>, rhs: &Array1<f64>, ridge: f64) -> Array1<f64> {
    let n = gram.nrows();
    let na_gram = to_na(&gram.view());
    let na_rhs = nalgebra::DVector::from_iterator(n, rhs.iter().copied());
    let solved = nalgebra::Cholesky::new(na_gram.clone())
        .map(|ch| ch.solve(&na_rhs))
        .or_else(|| {
            let ridged = na_gram + DMatrix::identity(n, n) * ridge;
            nalgebra::Cholesky::new(ridged).map(|ch| ch.solve(&na_rhs))
        });
    match solved {
        Some(b) => Array1::from_iter(b.iter().copied()),
        // Degenerate even with ridge: zero predictor.
        None => Array1::zeros(n),
    }
}
