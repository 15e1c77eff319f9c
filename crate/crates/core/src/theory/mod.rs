//! Numerical checks of the collapse, approximation, stability and rate
//! bounds. Everything here consumes finished runs or plain matrices; the
//! iteration loop itself is never instrumented.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{is_symmetric, spectral_norm, sym_function, sym_min_eigenvalue};

mod collapse;
mod gauss_newton;
mod rates;

pub use collapse::{audit_collapse, CollapseCheck, CollapseReport, CollapseStep};
pub use gauss_newton::{audit_linearization_error, gauss_newton_reference, LinearizationMargin};
pub use rates::{rate_constants, RateConstants, RateInputs};

/// `A ⪯ B`: the smallest eigenvalue of `B − A` is at least
/// `−tol · max(1, ‖B‖)`.
pub fn psd_order(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> Result<bool> {
    check_dim("psd_order rows", a.nrows(), b.nrows())?;
    check_dim("psd_order cols", a.ncols(), b.ncols())?;
    if !is_symmetric(a, tol) || !is_symmetric(b, tol) {
        return Err(Error::NotSymmetric { context: "psd_order" });
    }
    if a.is_empty() {
        return Ok(true);
    }
    let scale = spectral_norm(b).max(1.0);
    Ok(sym_min_eigenvalue(&(b - a)) >= -tol * scale)
}

/// `(C(I + M²hC)^{-2}, C(I + γ²hC)^{-2})`, the one-step bracket of the
/// linearized deviation dynamics.
pub fn covariance_sandwich(c: &DMatrix<f64>, h: f64, gamma: f64, m: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(gamma > 0.0 && gamma <= m) {
        return Err(Error::invalid("gamma", format!("need 0 < γ ≤ M, got γ = {gamma}, M = {m}")));
    }
    if !(h > 0.0) {
        return Err(Error::invalid("h", format!("must be positive, got {h}")));
    }
    if !is_symmetric(c, crate::linalg::PSD_RTOL) {
        return Err(Error::NotSymmetric {
            context: "covariance sandwich",
        });
    }
    let (g2, m2) = (gamma * gamma, m * m);
    let lower = sym_function(c, |l| l / (1.0 + m2 * h * l).powi(2));
    let upper = sym_function(c, |l| l / (1.0 + g2 * h * l).powi(2));
    Ok((lower, upper))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub bound: f64,
    pub max_ratio: f64,
    /// Index `n` of the worst ratio `r_{n+1}/r_n`.
    pub worst_step: Option<usize>,
    pub passed: bool,
}

/// Residual growth audit `‖z − H(ū_{n+1})‖ ≤ (1 + M√(μ/2))‖z − H(ū_n)‖`.
pub fn stability_report(residual_norms: &[f64], m: f64, mu: f64) -> StabilityReport {
    let bound = 1.0 + m * (mu / 2.0).sqrt();
    let mut max_ratio = 0.0f64;
    let mut worst_step = None;
    for (n, w) in residual_norms.windows(2).enumerate() {
        let ratio = if w[0] > 0.0 {
            w[1] / w[0]
        } else if w[1] == 0.0 {
            1.0
        } else {
            f64::INFINITY
        };
        if worst_step.is_none() || ratio > max_ratio {
            max_ratio = ratio;
            worst_step = Some(n);
        }
    }
    StabilityReport {
        bound,
        max_ratio,
        worst_step,
        passed: !(max_ratio > bound + 1e-10),
    }
}

pub fn audit_stability(residual_norms: &[f64], m: f64, mu: f64) -> bool {
    stability_report(residual_norms, m, mu).passed
}
