//! Small dense complex linear-algebra helpers.

use nalgebra::SymmetricEigen;

use crate::{CMatrix, CVector, C64};

/// `Re Tr(A B)`, the real inner product on Hermitian matrices when `B` is
/// Hermitian.
pub fn re_trace_product(a: &CMatrix, b: &CMatrix) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let n = a.nrows();
    let (a, b) = (a.as_slice(), b.as_slice());
    let mut acc = 0.0;
    // Column-major: a[(i, j)] = a[j·n + i].
    for j in 0..n {
        let col = &a[j * n..(j + 1) * n];
        for (i, x) in col.iter().enumerate() {
            let y = b[i * n + j];
            acc += x.re * y.re - x.im * y.im;
        }
    }
    acc
}

pub fn trace_re(a: &CMatrix) -> f64 {
    (0..a.nrows()).map(|i| a[(i, i)].re).sum()
}

/// `(A + A^H) / 2`.
pub fn hermitian_part(a: &CMatrix) -> CMatrix {
    (a + a.adjoint()).scale(0.5)
}

/// Thin factor `F` with `F Fᴴ ≈ A` for Hermitian PSD `A`; eigenvalues below
/// `1e-12·λ_max` (including rounding-level negatives) are dropped.
pub fn psd_factor(a: &CMatrix) -> CMatrix {
    let (values, vectors) = hermitian_eigen(a);
    let top = values.first().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..values.len()).filter(|&k| values[k] > 1e-12 * top && values[k] > 0.0).collect();
    let mut f = CMatrix::zeros(a.nrows(), keep.len());
    for (c, &k) in keep.iter().enumerate() {
        f.set_column(c, &vectors.column(k).scale(values[k].sqrt()));
    }
    f
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted in
/// descending order; column `k` of the returned matrix pairs with value `k`.
pub fn hermitian_eigen(a: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = SymmetricEigen::new(hermitian_part(a));
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Largest eigenvalue and a unit eigenvector for it.
pub fn principal_eigenpair(a: &CMatrix) -> (f64, CVector) {
    let (values, vectors) = hermitian_eigen(a);
    (values[0], vectors.column(0).into_owned())
}

/// `Tr(Q) - ||Q||_2` for Hermitian PSD `Q`; zero iff `Q` has rank at most one.
pub fn rank_one_residual(q: &CMatrix) -> f64 {
    let (values, _) = hermitian_eigen(q);
    trace_re(q) - values[0]
}

/// Lower Cholesky factor of a Hermitian matrix with a real positive
/// diagonal; `None` unless the matrix is numerically positive definite.
pub fn hermitian_cholesky(a: &CMatrix) -> Option<CMatrix> {
    let n = a.nrows();
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = C64::new(d, 0.0);
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

pub fn outer(x: &CVector, y: &CVector) -> CMatrix {
    x * y.adjoint()
}

pub fn frobenius(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn cis(angle: f64) -> C64 {
    C64::from_polar(1.0, angle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_descending() {
        let a = CMatrix::from_row_slice(
            2,
            2,
            &[C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::new(0.0, -1.0), C64::new(1.0, 0.0)],
        );
        let (vals, vecs) = hermitian_eigen(&a);
        assert!((vals[0] - 2.0).abs() < 1e-12 && vals[1].abs() < 1e-12);
        let v = vecs.column(0).into_owned();
        let av = &a * &v;
        assert!((av - v.scale(2.0)).norm() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let neg = CMatrix::from_diagonal_element(2, 2, C64::new(-1.0, 0.0));
        assert!(hermitian_cholesky(&neg).is_none());
        let x = CVector::from_vec(vec![C64::new(1.0, 2.0), C64::new(-0.5, 0.3)]);
        let a = outer(&x, &x) + CMatrix::identity(2, 2);
        let l = hermitian_cholesky(&a).unwrap();
        assert!(frobenius(&(&l * l.adjoint() - &a)) < 1e-12);
    }

    #[test]
    fn residual_zero_for_rank_one() {
        let x = CVector::from_vec(vec![C64::new(1.0, 2.0), C64::new(-0.5, 0.3), C64::new(0.0, 1.0)]);
        assert!(rank_one_residual(&outer(&x, &x)).abs() < 1e-12);
        assert!((rank_one_residual(&CMatrix::identity(3, 3)) - 2.0).abs() < 1e-12);
    }
}
