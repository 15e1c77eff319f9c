//! Truncated linearization of the forward map from ensemble deviations.

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::forward::Regularizer;
use crate::linalg::{rank_factor, singular_values, svd, sym_eigen_desc, RankFactor, RANK_RTOL};

/// Action of `H_n = [G_n; C0^{-1/2}]` on the deviations, together with the
/// factors that define `G_n = W T_M(B) Vᵀ`.
#[derive(Debug, Clone)]
pub struct LinearizedMap {
    /// `G_n T`, `d_y × J`.
    pub g_action: DMatrix<f64>,
    /// `C0^{-1/2} T`, `d_u × J`.
    pub reg_action: DMatrix<f64>,
    /// Orthonormal basis of the deviation span, `d_u × r`.
    pub v: DMatrix<f64>,
    /// Orthonormal basis of the image-deviation span, `d_y × r'`.
    pub w: DMatrix<f64>,
    /// Truncated core `T_M(B)`, `r' × r`.
    pub core: DMatrix<f64>,
    /// Singular values of the untruncated core `B = R Qᵀ (Q Qᵀ)^{-1}`.
    pub raw_singular_values: Vec<f64>,
    pub m_g: f64,
}

impl LinearizedMap {
    /// Stacked action `[G_n T; C0^{-1/2} T]`.
    pub fn action(&self) -> DMatrix<f64> {
        let (dy, j) = self.g_action.shape();
        let du = self.reg_action.nrows();
        let mut a = DMatrix::zeros(dy + du, j);
        a.rows_mut(0, dy).copy_from(&self.g_action);
        a.rows_mut(dy, du).copy_from(&self.reg_action);
        a
    }

    /// Dense `G_n`, `d_y × d_u`.
    pub fn g_matrix(&self) -> DMatrix<f64> {
        &self.w * &self.core * self.v.transpose()
    }

    /// Dense `H_n`, `d_z × d_u`.
    pub fn h_matrix(&self, reg: &Regularizer) -> DMatrix<f64> {
        let g = self.g_matrix();
        let (dy, du) = g.shape();
        let mut h = DMatrix::zeros(dy + du, du);
        h.rows_mut(0, dy).copy_from(&g);
        h.rows_mut(dy, du).copy_from(&reg.to_dense());
        h
    }

    /// Singular values of the truncated core, i.e. the nonzero singular
    /// values of `G_n`, descending.
    pub fn singular_values(&self) -> Vec<f64> {
        if self.core.is_empty() {
            return Vec::new();
        }
        singular_values(&self.core).iter().cloned().collect()
    }

    /// Untruncated `‖B‖₂`.
    pub fn raw_norm(&self) -> f64 {
        self.raw_singular_values.first().cloned().unwrap_or(0.0)
    }

    /// Extreme eigenvalues `(γ², M²)` of `H_nᵀ H_n = G_nᵀ G_n + C0^{-1}`.
    pub fn curvature_bounds(&self, reg: &Regularizer) -> (f64, f64) {
        let du = self.v.nrows();
        let s = self.singular_values();
        let smax2 = s.first().map(|x| x * x).unwrap_or(0.0);
        if let Regularizer::ScaledIdentity { scale, .. } = reg {
            // G_nᵀG_n has the squared singular values on span(V) and zero elsewhere
            let c2 = scale * scale;
            let smin2 = if s.len() == du {
                s.last().map(|x| x * x).unwrap_or(0.0)
            } else {
                0.0
            };
            return (c2 + smin2, c2 + smax2);
        }
        let g = self.g_matrix();
        let m = g.transpose() * &g + reg.precision();
        let (vals, _) = sym_eigen_desc(&m);
        (vals[vals.len() - 1].max(0.0), vals[0].max(0.0))
    }
}

fn truncate(b: &DMatrix<f64>, m_g: f64) -> (DMatrix<f64>, Vec<f64>) {
    if b.is_empty() {
        return (b.clone(), Vec::new());
    }
    let f = svd(b);
    let raw: Vec<f64> = f.s.iter().cloned().collect();
    let clipped = f.s.map(|s| s.min(m_g));
    let core = &f.u * DMatrix::from_diagonal(&clipped) * f.v.transpose();
    (core, raw)
}

/// Factor form `T = V Q`, `Y = W R` and the untruncated core
/// `B = R Qᵀ (Q Qᵀ)^{-1}`.
fn factors(t: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(RankFactor, RankFactor, DMatrix<f64>)> {
    check_dim("linearization ensemble size", t.ncols(), y.ncols())?;
    let tf = rank_factor(t, RANK_RTOL);
    let yf = rank_factor(y, RANK_RTOL);
    let (r, rp) = (tf.rank(), yf.rank());
    if r == 0 || rp == 0 {
        return Ok((tf, yf, DMatrix::zeros(rp, r)));
    }
    let lam = &tf.coeffs * tf.coeffs.transpose();
    let rq = &yf.coeffs * tf.coeffs.transpose();
    // B Λ = R Qᵀ, Λ symmetric positive definite on the retained rank
    let chol = lam.cholesky().ok_or(Error::Singular {
        context: "deviation Gram matrix in linearization",
    })?;
    let b = chol.solve(&rq.transpose()).transpose();
    Ok((tf, yf, b))
}

/// `‖C^{yu}(C^{uu})^†‖₂` of a deviation pair; the basis for the default
/// truncation bound.
pub fn untruncated_norm(t: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    let (_, _, b) = factors(t, y)?;
    if b.is_empty() {
        return Ok(0.0);
    }
    Ok(singular_values(&b)[0])
}

/// Builds the truncated linearization from centred deviations `t`
/// (`d_u × J`) and centred image deviations `y` (`d_y × J`).
pub fn linearize(t: &DMatrix<f64>, y: &DMatrix<f64>, reg: &Regularizer, m_g: f64) -> Result<LinearizedMap> {
    if !(m_g > 0.0) {
        return Err(Error::invalid("M_G", format!("must be positive, got {m_g}")));
    }
    check_dim("regularizer", reg.dim(), t.nrows())?;
    let (tf, yf, b) = factors(t, y)?;
    let (core, raw) = truncate(&b, m_g);
    let g_action = if core.is_empty() {
        DMatrix::zeros(y.nrows(), t.ncols())
    } else {
        &yf.basis * (&core * &tf.coeffs)
    };
    Ok(LinearizedMap {
        g_action,
        reg_action: reg.apply_columns(t),
        v: tf.basis,
        w: yf.basis,
        core,
        raw_singular_values: raw,
        m_g,
    })
}
