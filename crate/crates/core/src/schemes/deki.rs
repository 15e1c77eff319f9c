//! Mean and deviation updates of DEKI.

use nalgebra::{DMatrix, DVector};

use super::kalman_increment;
use super::linearize::LinearizedMap;
use crate::ensemble::CovarianceBundle;
use crate::error::{check_dim, Error, Result};
use crate::linalg::solve_shifted_psd;

/// `ū ← ū + h̃ C̃^{uz}(I + h̃ C̃^{zz})^{-1}(z − H(ū))` with dense dropout
/// covariance blocks.
pub fn deki_mean_step(
    mean: &DVector<f64>,
    dropout: &CovarianceBundle,
    htilde: f64,
    z: &DVector<f64>,
    h_mean: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("mean step target", z.len(), h_mean.len())?;
    check_dim("mean step covariance", dropout.czz.nrows(), z.len())?;
    check_dim("mean step mean", dropout.cuz.nrows(), mean.len())?;
    let r = DMatrix::from_column_slice(z.len(), 1, (z - h_mean).as_slice());
    let k = solve_shifted_psd(&dropout.czz, htilde, &r)?;
    Ok(mean + (&dropout.cuz * k).column(0) * htilde)
}

/// Mean increment in ensemble space from dropout deviations `t_drop` and
/// their centred stacked images `y_drop`.
pub fn mean_increment(
    t_drop: &DMatrix<f64>,
    y_drop: &DMatrix<f64>,
    htilde: f64,
    residual: &DVector<f64>,
) -> Result<DVector<f64>> {
    let r = DMatrix::from_column_slice(residual.len(), 1, residual.as_slice());
    Ok(kalman_increment(t_drop, y_drop, htilde, &r)?.column(0).into_owned())
}

/// Linearized deviation update `T ← (I + h C H_nᵀ H_n)^{-1} T`, evaluated
/// as `T (I_J + a AᵀA)^{-1}` with `A = H_n T` and `a = h/(J−1)`.
pub fn deki_deviation_step(t: &DMatrix<f64>, hmap: &LinearizedMap, h: f64) -> Result<DMatrix<f64>> {
    if !(h >= 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", format!("step must be nonnegative and finite, got {h}")));
    }
    let j = t.ncols();
    if j < 2 {
        return Err(Error::EnsembleTooSmall(j));
    }
    check_dim("linearized action", j, hmap.g_action.ncols())?;
    let a = h / (j as f64 - 1.0);
    let act = hmap.action();
    let gram = act.transpose() * &act;
    let ident = DMatrix::identity(j, j);
    let inv = solve_shifted_psd(&gram, a, &ident)?;
    Ok(t * inv)
}

/// `τ ← τ − h C Hᵀ(I + h H C Hᵀ)^{-1} H τ` with dense `C` and `H`.
pub fn deviation_step_woodbury(t: &DMatrix<f64>, cuu: &DMatrix<f64>, hmat: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>> {
    let inner = hmat * cuu * hmat.transpose();
    let ht = hmat * t;
    let k = solve_shifted_psd(&inner, h, &ht)?;
    Ok(t - cuu * hmat.transpose() * k * h)
}

/// `τ ← (I + h C HᵀH)^{-1} τ` with dense `C` and `H`.
pub fn deviation_step_inverse(t: &DMatrix<f64>, cuu: &DMatrix<f64>, hmat: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>> {
    let d = cuu.nrows();
    let m = DMatrix::identity(d, d) + cuu * hmat.transpose() * hmat * h;
    m.lu().solve(t).ok_or(Error::Singular {
        context: "dense deviation update",
    })
}
