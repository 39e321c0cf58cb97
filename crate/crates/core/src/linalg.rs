//! Small dense complex linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

/// Relative cutoff used for every rank decision in the crate.
pub const RANK_TOL: f64 = 1e-10;
/// Absolute floor applied to the largest eigenvalue before scaling by [`RANK_TOL`].
pub const RANK_FLOOR: f64 = 1e-14;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn r(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn vec_norm(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `<a|b>` with the first argument conjugated.
pub fn inner(a: &CVec, b: &CVec) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// `<psi|op|psi>`.
pub fn expectation(op: &CMat, psi: &CVec) -> C64 {
    inner(psi, &(op * psi))
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

/// Deviation of a square matrix from hermiticity, `max |m - m^dagger|`.
pub fn hermiticity_defect(m: &CMat) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
pub fn eigh(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), CMat::zeros(0, 0));
    }
    // symmetrize so round-off asymmetry does not leak into the solver
    let sym = (m + m.adjoint()).scale(0.5);
    if sym.iter().all(|z| z.im == 0.0) {
        return eigh_real(&sym.map(|z| z.re));
    }
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = CMat::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(k));
    }
    (values, vectors)
}

fn eigh_real(m: &DMatrix<f64>) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = CMat::from_fn(n, n, |i, col| r(eig.eigenvectors[(i, order[col])]));
    (values, vectors)
}

/// Eigenvalues only, ascending.
pub fn eigvalsh(m: &CMat) -> Vec<f64> {
    eigh(m).0
}

/// Threshold below which an eigenvalue counts as zero, given the spectrum.
pub fn zero_threshold(eigenvalues: &[f64]) -> f64 {
    let max = eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    RANK_TOL * max.max(RANK_FLOOR)
}

/// Singular values, descending. Uses the Gram matrix of the smaller side.
pub fn singular_values(a: &CMat) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let svd = a.clone().svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

pub fn spectral_norm(a: &CMat) -> f64 {
    singular_values(a).first().copied().unwrap_or(0.0)
}

/// Orthonormal basis (columns) of the kernel of `a`, computed from a full SVD.
///
/// `a` is zero-padded to a square matrix so the right singular vectors are complete.
pub fn kernel_svd(a: &CMat, rel_tol: f64) -> CMat {
    let n = a.ncols();
    if n == 0 {
        return CMat::zeros(0, 0);
    }
    let rows = a.nrows().max(n);
    let mut padded = CMat::zeros(rows, n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let smax = svd.singular_values.iter().fold(0.0f64, |m, s| m.max(*s));
    let cut = rel_tol * smax.max(RANK_FLOOR);
    let cols: Vec<CVec> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] <= cut)
        .map(|k| v_t.row(k).adjoint())
        .collect();
    columns_to_matrix(n, &cols)
}

/// Numerical rank through singular values with the crate-wide relative cutoff.
pub fn rank(a: &CMat) -> usize {
    let s = singular_values(a);
    let smax = s.first().copied().unwrap_or(0.0);
    let cut = RANK_TOL * smax.max(RANK_FLOOR);
    s.iter().filter(|&&v| v > cut).count()
}

pub fn columns_to_matrix(nrows: usize, cols: &[CVec]) -> CMat {
    let mut m = CMat::zeros(nrows, cols.len());
    for (k, v) in cols.iter().enumerate() {
        m.set_column(k, v);
    }
    m
}

/// Orthonormalize the columns of `m`, dropping numerically dependent ones.
pub fn orthonormal_columns(m: &CMat, rel_tol: f64) -> CMat {
    if m.ncols() == 0 {
        return m.clone();
    }
    let gram = m.adjoint() * m;
    let (vals, vecs) = eigh(&gram);
    let cut = rel_tol * vals.iter().fold(0.0f64, |a, v| a.max(*v)).max(RANK_FLOOR);
    let mut cols = Vec::new();
    for k in (0..vals.len()).rev() {
        if vals[k] > cut {
            let v = m * vecs.column(k);
            cols.push(v.unscale(vals[k].sqrt()));
        }
    }
    columns_to_matrix(m.nrows(), &cols)
}

/// Kernel of a complex linear map restricted to real vectors.
///
/// `A x = 0` with `x` real is equivalent to `[Re A; Im A] x = 0`.
pub fn real_kernel(a: &CMat, rel_tol: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let mut stacked = CMat::zeros(2 * m, n);
    for i in 0..m {
        for j in 0..n {
            stacked[(i, j)] = r(a[(i, j)].re);
            stacked[(m + i, j)] = r(a[(i, j)].im);
        }
    }
    let k = kernel_svd(&stacked, rel_tol);
    // the stacked matrix is real; its SVD vectors may carry a global phase per column
    let mut out = DMatrix::<f64>::zeros(n, k.ncols());
    for col in 0..k.ncols() {
        let v = k.column(col);
        let pivot = v.iter().fold(ZERO, |best, z| if z.norm() > best.norm() { *z } else { best });
        let phase = if pivot.norm() > 0.0 { pivot.conj() / pivot.norm() } else { ONE };
        for i in 0..n {
            out[(i, col)] = (v[i] * phase).re;
        }
    }
    // re-orthonormalize in the real sense
    let cm = out.map(r);
    orthonormal_columns(&cm, rel_tol).map(|z| z.re)
}

/// Minimum-norm least-squares solution `x` of `a x = b`.
pub fn lstsq(a: &CMat, b: &CVec) -> CVec {
    if a.ncols() == 0 {
        return CVec::zeros(0);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, s| m.max(*s));
    let eps = RANK_TOL * smax.max(RANK_FLOOR);
    svd.solve(b, eps).unwrap_or_else(|_| CVec::zeros(a.ncols()))
}

/// Row-major vectorization: element `(i, j)` maps to `i * ncols + j`.
pub fn vec_row_major(m: &CMat) -> CVec {
    let (rows, cols) = m.shape();
    CVec::from_fn(rows * cols, |k, _| m[(k / cols, k % cols)])
}

pub fn unvec_row_major(v: &CVec, rows: usize, cols: usize) -> CMat {
    CMat::from_fn(rows, cols, |i, j| v[i * cols + j])
}

/// Matrix exponential `exp(-i t H)` of a Hermitian matrix via its eigendecomposition.
pub fn unitary_exp(h: &CMat, t: f64) -> CMat {
    let (vals, vecs) = eigh(h);
    let n = vals.len();
    let mut d = CMat::zeros(n, n);
    for (k, v) in vals.iter().enumerate() {
        d[(k, k)] = (-I * (t * v)).exp();
    }
    &vecs * d * vecs.adjoint()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_of_wide_matrix_is_complete() {
        let a = CMat::from_row_slice(1, 3, &[ONE, I, ZERO]);
        let k = kernel_svd(&a, 1e-10);
        assert_eq!(k.ncols(), 2);
        assert!(frobenius(&(&a * &k)) < 1e-14);
    }

    #[test]
    fn real_kernel_counts_real_solutions() {
        // (1, -i, 0) . x = 0 for real x forces x0 = x1 = 0
        let a = CMat::from_row_slice(1, 3, &[ONE, -I, ZERO]);
        let k = real_kernel(&a, 1e-10);
        assert_eq!(k.ncols(), 1);
        assert!(k[(0, 0)].abs() < 1e-14 && k[(1, 0)].abs() < 1e-14);
        assert!((k[(2, 0)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eigh_is_sorted() {
        let m = CMat::from_row_slice(2, 2, &[r(2.0), I, -I, r(2.0)]);
        let (v, _) = eigh(&m);
        assert!((v[0] - 1.0).abs() < 1e-14 && (v[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn lstsq_recovers_solution() {
        let a = CMat::from_row_slice(3, 2, &[ONE, ZERO, ZERO, ONE, ONE, ONE]);
        let x = CVec::from_vec(vec![c(1.0, 2.0), r(-1.0)]);
        let b = &a * &x;
        assert!(vec_norm(&(lstsq(&a, &b) - x)) < 1e-13);
    }
}
