//! Dense decompositions shared by the solver, the refit and inference.
//!
//! Matrices live in `nalgebra`; the SVD is delegated to `faer`, which is
//! markedly faster on the panel sizes used here.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest admissible condition number of a Gram matrix before an OLS solve
/// is declared singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Thin SVD `A = U diag(s) V'` with singular values in nonincreasing order.
///
/// Signs are fixed so that, in every left singular vector, the entry of
/// largest magnitude is positive (ties go to the lowest row index); the
/// matching right vector is flipped along with it.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    /// Number of singular values above `rel * s_1`.
    pub fn numerical_rank(&self, rel: f64) -> usize {
        numerical_rank(self.singular_values.as_slice(), rel)
    }
}

pub(crate) fn numerical_rank(sv: &[f64], rel: f64) -> usize {
    match sv.first() {
        Some(&s1) if s1 > 0.0 => sv.iter().filter(|&&s| s > rel * s1).count(),
        _ => 0,
    }
}

pub fn svd(a: &DMatrix<f64>) -> Result<Svd> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let (n, t) = a.shape();
    let fa = faer::Mat::<f64>::from_fn(n, t, |i, j| a[(i, j)]);
    let dec = fa.thin_svd().map_err(|_| Error::NonFinite)?;
    let r = n.min(t);
    let (fu, fs, fv) = (dec.U(), dec.S().column_vector(), dec.V());

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&x, &y| fs[y].total_cmp(&fs[x]));

    let mut u = DMatrix::zeros(n, r);
    let mut v = DMatrix::zeros(t, r);
    let mut s = DVector::zeros(r);
    for (col, &src) in order.iter().enumerate() {
        s[col] = fs[src].max(0.0);
        let mut pivot = 0;
        let mut best = -1.0;
        for i in 0..n {
            let m = fu[(i, src)].abs();
            if m > best {
                best = m;
                pivot = i;
            }
        }
        let sign = if fu[(pivot, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            u[(i, col)] = sign * fu[(i, src)];
        }
        for j in 0..t {
            v[(j, col)] = sign * fv[(j, src)];
        }
    }
    Ok(Svd {
        u,
        singular_values: s,
        v,
    })
}

pub fn singular_values(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let (n, t) = a.shape();
    let fa = faer::Mat::<f64>::from_fn(n, t, |i, j| a[(i, j)]);
    let mut sv = fa.singular_values().map_err(|_| Error::NonFinite)?;
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(DVector::from_vec(sv))
}

/// `U_r diag(s_r) V_r'` for the leading `r` triplets.
pub(crate) fn reconstruct(u: &DMatrix<f64>, s: &[f64], v: &DMatrix<f64>) -> DMatrix<f64> {
    let r = s.len();
    let (n, t) = (u.nrows(), v.nrows());
    if r == 0 {
        return DMatrix::zeros(n, t);
    }
    let mut us = u.columns(0, r).into_owned();
    for (j, &sj) in s.iter().enumerate() {
        us.column_mut(j).scale_mut(sj);
    }
    us * v.columns(0, r).transpose()
}

/// Inverse of a symmetric positive-definite Gram matrix via its eigen
/// decomposition. Returns `None` if the smallest eigenvalue is not positive
/// or the condition number exceeds [`MAX_CONDITION`].
pub fn guarded_inverse(gram: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let k = gram.nrows();
    if k == 1 {
        let g = gram[(0, 0)];
        return (g > 0.0 && g.is_finite()).then(|| DMatrix::from_element(1, 1, 1.0 / g));
    }
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || !max.is_finite() || max / min > MAX_CONDITION {
        return None;
    }
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / l);
    }
    Some(scaled * q.transpose())
}

/// Moore-Penrose inverse of a symmetric positive semidefinite matrix.
/// Eigenvalues at or below `MAX_CONDITION^-1` times the largest are
/// treated as zero.
pub(crate) fn pseudo_inverse_psd(gram: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.max();
    let q = &eig.eigenvectors;
    let mut scaled = DMatrix::zeros(q.nrows(), q.ncols());
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        if max > 0.0 && l > max / MAX_CONDITION {
            scaled.set_column(j, &(q.column(j) / l));
        }
    }
    scaled * q.transpose()
}

/// `sum_j w_j x_j x_j'` over rows `x_j` of `x` with `w_j != 0`.
pub(crate) fn weighted_gram<I>(x: &DMatrix<f64>, rows: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = (usize, f64)>,
{
    let k = x.ncols();
    let mut g = DMatrix::zeros(k, k);
    for (j, w) in rows {
        for a in 0..k {
            let xa = w * x[(j, a)];
            for b in a..k {
                g[(a, b)] += xa * x[(j, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// Quadratic form `x' A x`.
pub(crate) fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, t, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn svd_reconstructs_and_is_sorted() {
        for (n, t) in [(5, 3), (3, 5), (8, 8)] {
            let a = random(n, t, 7);
            let d = svd(&a).unwrap();
            let back = reconstruct(&d.u, d.singular_values.as_slice(), &d.v);
            assert!((back - &a).norm() < 1e-12);
            let s = d.singular_values.as_slice();
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
            let utu = d.u.transpose() * &d.u;
            assert!((utu - DMatrix::identity(n.min(t), n.min(t))).norm() < 1e-12);
        }
    }

    #[test]
    fn sign_convention_largest_entry_positive() {
        let a = random(6, 4, 11);
        let d = svd(&a).unwrap();
        for j in 0..d.u.ncols() {
            let col = d.u.column(j);
            let (imax, _) = col.iter().enumerate().fold((0, -1.0), |acc, (i, x)| {
                if x.abs() > acc.1 {
                    (i, x.abs())
                } else {
                    acc
                }
            });
            assert!(col[imax] > 0.0);
        }
        let d2 = svd(&(-&a)).unwrap();
        assert!((d.u - d2.u).norm() < 1e-12);
        assert!((d.v + d2.v).norm() < 1e-12);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut a = random(3, 3, 1);
        a[(1, 1)] = f64::INFINITY;
        assert!(matches!(svd(&a), Err(Error::NonFinite)));
    }

    #[test]
    fn pseudo_inverse_of_singular_gram() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pseudo_inverse_psd(&g);
        assert!((&p - DMatrix::from_element(2, 2, 0.25)).norm() < 1e-14);
        assert_eq!(
            pseudo_inverse_psd(&DMatrix::zeros(2, 2)),
            DMatrix::zeros(2, 2)
        );
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        assert!((pseudo_inverse_psd(&d) - guarded_inverse(&d).unwrap()).norm() < 1e-14);
    }

    #[test]
    fn guarded_inverse_detects_singularity() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(guarded_inverse(&g).is_none());
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-13]);
        assert!(guarded_inverse(&g).is_none());
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let inv = guarded_inverse(&g).unwrap();
        assert!((inv * g - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);
        assert!(guarded_inverse(&DMatrix::zeros(1, 1)).is_none());
    }
}
