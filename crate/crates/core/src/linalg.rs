//! Small dense symmetric-matrix helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigen-decomposition with eigenvalues sorted ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Applies `f` to the spectrum of a symmetric matrix.
pub fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, j| vecs[(i, j)] * f(vals[j]));
    &scaled * vecs.transpose()
}

/// Principal square root; negative eigenvalues are treated as zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(m, |v| v.max(0.0).sqrt())
}

/// Pseudo-inverse square root: eigenvalues at or below `floor` map to zero.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    sym_apply(m, |v| if v > floor { 1.0 / v.sqrt() } else { 0.0 })
}

pub fn sym_pinv(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    sym_apply(m, |v| if v > floor { 1.0 / v } else { 0.0 })
}

pub fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(m);
    vals.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Condition number of a symmetric positive semi-definite matrix (infinite if singular).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(m);
    let lo = vals[0];
    let hi = vals[vals.len() - 1];
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// `xᵀ A x` for symmetric `A`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x))
}
