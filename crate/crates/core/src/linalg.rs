//! Dense linear-algebra helpers shared by the schemes and the audits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative cutoff on singular values below which a direction counts as
/// numerically absent.
pub const RANK_RTOL: f64 = 1e-12;

/// Relative tolerance for symmetry and PSD checks.
pub const PSD_RTOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric matrix with eigenvalues in descending
/// order. Ties keep their original index order.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, rtol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() <= rtol * scale
}

/// Thin singular value decomposition `M = U diag(s) Vᵀ` with `s`
/// descending and `k = min(m, n)` columns in `U` and `V`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn recompose(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.s) * self.v.transpose()
    }
}

/// One-sided Jacobi SVD. Slower than bidiagonalization but accurate to
/// working precision for the small dense matrices used here; the
/// bidiagonal routine in nalgebra occasionally returns factors whose
/// product misses the input by many orders of magnitude more than roundoff.
pub fn svd(m: &DMatrix<f64>) -> Svd {
    let (rows, cols) = m.shape();
    if rows < cols {
        let t = svd(&m.transpose());
        return Svd { u: t.v, s: t.s, v: t.u };
    }
    let n = cols;
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = a.column(i).norm_squared();
                let beta = a.column(j).norm_squared();
                let gamma = a.column(i).dot(&a.column(j));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let (x, y) = (a[(k, i)], a[(k, j)]);
                    a[(k, i)] = c * x - s * y;
                    a[(k, j)] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (v[(k, i)], v[(k, j)]);
                    v[(k, i)] = c * x - s * y;
                    v[(k, j)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|k| a.column(k).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap_or(std::cmp::Ordering::Equal).then(x.cmp(&y)));
    let s = DVector::from_iterator(n, order.iter().map(|&k| norms[k]));
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let mut u = DMatrix::zeros(rows, n);
    let mut vs = DMatrix::zeros(n, n);
    let mut filled = 0;
    for (pos, &k) in order.iter().enumerate() {
        vs.set_column(pos, &v.column(k));
        if norms[k] > f64::MIN_POSITIVE && norms[k] > 1e-300 * smax.max(1.0) {
            u.set_column(pos, &(a.column(k) / norms[k]));
            filled = pos + 1;
        }
    }
    if filled < n {
        // exact zeros: complete U orthonormally
        let comp = orthonormal_complement(&u.columns(0, filled).into_owned());
        u.columns_mut(filled, n - filled).copy_from(&comp.columns(0, n - filled));
    }
    Svd { u, s, v: vs }
}

/// Singular values, descending.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    svd(m).s
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    singular_values(m)[0]
}

/// `‖T Tᵀ‖₂ / (J - 1)` computed from the `J × J` Gram matrix.
pub fn covariance_norm(deviations: &DMatrix<f64>) -> f64 {
    let j = deviations.ncols();
    if j < 2 {
        return 0.0;
    }
    let gram = deviations.transpose() * deviations;
    let (vals, _) = sym_eigen_desc(&gram);
    (vals[0].max(0.0)) / (j as f64 - 1.0)
}

/// Rank-revealing factorization `M = basis · coeffs` with an orthonormal
/// `basis`. Directions with singular value at most `rtol · σ_max` are
/// dropped.
#[derive(Debug, Clone)]
pub struct RankFactor {
    pub basis: DMatrix<f64>,
    pub coeffs: DMatrix<f64>,
    pub singular_values: DVector<f64>,
}

impl RankFactor {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }
}

pub fn rank_factor(m: &DMatrix<f64>, rtol: f64) -> RankFactor {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return RankFactor {
            basis: DMatrix::zeros(rows, 0),
            coeffs: DMatrix::zeros(0, cols),
            singular_values: DVector::zeros(0),
        };
    }
    let f = svd(m);
    let smax = f.s[0];
    let rank = if smax > 0.0 { f.s.iter().filter(|&&s| s > rtol * smax).count() } else { 0 };
    let basis = f.u.columns(0, rank).into_owned();
    let mut coeffs = f.v.columns(0, rank).transpose();
    for k in 0..rank {
        coeffs.row_mut(k).scale_mut(f.s[k]);
    }
    RankFactor {
        basis,
        coeffs,
        singular_values: f.s.rows(0, rank).into_owned(),
    }
}

/// Completes the orthonormal columns of `basis` to an orthonormal basis of
/// the whole space, returning only the new columns. Candidates are the
/// standard basis vectors in order, so the result is deterministic.
pub fn orthonormal_complement(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let n = basis.nrows();
    let mut cols: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
    let start = cols.len();
    for i in 0..n {
        if cols.len() == n {
            break;
        }
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        // two passes of Gram-Schmidt
        for _ in 0..2 {
            for c in &cols {
                let d = c.dot(&v);
                v.axpy(-d, c, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    let extra = cols.len() - start;
    let mut out = DMatrix::zeros(n, extra);
    for (k, c) in cols[start..].iter().enumerate() {
        out.set_column(k, c);
    }
    out
}

/// Applies `f` to the spectrum of a symmetric matrix.
pub fn sym_function(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(m);
    let mapped = DVector::from_iterator(vals.len(), vals.iter().map(|&x| f(x)));
    &vecs * DMatrix::from_diagonal(&mapped) * vecs.transpose()
}

/// Solves `(I + a·K) x = b` for symmetric PSD `K` and `a ≥ 0`.
pub fn solve_shifted_psd(k: &DMatrix<f64>, a: f64, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let mut m = k * a;
    for i in 0..n {
        m[(i, i)] += 1.0;
    }
    let m = symmetrize(&m);
    match m.clone().cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => m
            .lu()
            .solve(b)
            .ok_or(Error::Singular { context: "shifted PSD system" }),
    }
}

/// Sign convention for singular/eigen vectors: the entry of largest
/// magnitude is made positive.
pub fn canonical_sign(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0.0f64;
        for &x in col.iter() {
            if x.abs() > best.abs() + 1e-14 {
                best = x;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn check_svd(m: &DMatrix<f64>) {
        let f = svd(m);
        let k = m.nrows().min(m.ncols());
        assert_eq!(f.s.len(), k);
        let scale = m.amax().max(1.0);
        assert!((f.recompose() - m).amax() < 1e-13 * scale * k as f64);
        assert!((f.u.transpose() * &f.u - DMatrix::identity(k, k)).amax() < 1e-13);
        assert!((f.v.transpose() * &f.v - DMatrix::identity(k, k)).amax() < 1e-13);
        assert!(f.s.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn svd_rank_deficient_and_zero() {
        check_svd(&DMatrix::zeros(3, 2));
        check_svd(&DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]));
        let c = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert!((spectral_norm(&c) - 5.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn svd_reconstructs(rows in 1usize..9, cols in 1usize..9, seed in 0u64..1000, deficient in any::<bool>()) {
            let mut st = crate::rng::RngStream::new(seed, crate::rng::Purpose::Trial, 0);
            let mut m = DMatrix::from_fn(rows, cols, |_, _| st.normal());
            if deficient && cols > 1 {
                let c0 = m.column(0) * 2.0;
                m.set_column(cols - 1, &c0);
            }
            check_svd(&m);
        }
    }

    #[test]
    fn eigen_descending_order() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 2.0]);
        let (v, q) = sym_eigen_desc(&m);
        assert_eq!(v.as_slice(), &[3.0, 2.0, 1.0]);
        assert!((q[(1, 0)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rank_factor_drops_null_direction() {
        // columns sum to zero: rank 1
        let t = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, -2.0, 2.0]);
        let f = rank_factor(&t, RANK_RTOL);
        assert_eq!(f.rank(), 1);
        assert!((&f.basis * &f.coeffs - &t).amax() < 1e-14);
    }

    #[test]
    fn complement_is_orthonormal() {
        let b = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]).normalize();
        let c = orthonormal_complement(&b);
        assert_eq!(c.ncols(), 2);
        let mut full = DMatrix::zeros(3, 3);
        full.set_column(0, &b.column(0));
        full.set_column(1, &c.column(0));
        full.set_column(2, &c.column(1));
        let g = full.transpose() * &full;
        assert!((g - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn covariance_norm_matches_dense() {
        let t = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -1.0, 0.0, 1.0, -1.0]);
        let dense = &t * t.transpose() / 2.0;
        assert!((covariance_norm(&t) - spectral_norm(&dense)).abs() < 1e-12);
    }
}
