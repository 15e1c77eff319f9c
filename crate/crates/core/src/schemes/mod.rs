//! Iteration kernels: EKI, naive DEKI, DEKI with separated mean and
//! deviation updates, and localized EKI.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{covariance_norm, solve_shifted_psd, spectral_norm};

pub mod deki;
pub mod eki;
pub mod leki;
pub mod linearize;
pub mod run;

pub use deki::{deki_deviation_step, deki_mean_step, deviation_step_inverse, deviation_step_woodbury};
pub use eki::{eki_step, naive_deki_step};
pub use leki::{gaspari_cohn, gaspari_cohn_localization, leki_step, localized_drift, LocalizationMatrix};
pub use linearize::{linearize, untruncated_norm, LinearizedMap};
pub use run::{deki_iterate, iterate, RunOptions, RunRecord, Scheme, Snapshots, StepMetrics};

/// Step-size constants: `h_n = θ/(‖C‖ + ε0)` for the deviations and
/// `h̃_n = μ/(‖C‖ + ε0)` for the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub theta: f64,
    pub mu: f64,
    pub eps0: f64,
}

impl StepSchedule {
    pub fn new(theta: f64, mu: f64, eps0: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::invalid("theta", format!("must be positive, got {theta}")));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::invalid("mu", format!("must be positive, got {mu}")));
        }
        if !(eps0 >= 0.0) {
            return Err(Error::invalid("eps0", format!("must be nonnegative, got {eps0}")));
        }
        Ok(StepSchedule { theta, mu, eps0 })
    }

    /// Mean step `μ` with deviation step `ratio · μ`.
    pub fn with_ratio(mu: f64, ratio: f64, eps0: f64) -> Result<Self> {
        Self::new(ratio * mu, mu, eps0)
    }

    /// `(h_n, h̃_n)` for a given `‖C^{uu}‖₂`.
    pub fn steps(&self, cov_norm: f64) -> (f64, f64) {
        let d = cov_norm + self.eps0;
        (self.theta / d, self.mu / d)
    }
}

/// `(h_n, h̃_n)` for a dense covariance.
pub fn adaptive_steps(cuu: &DMatrix<f64>, sched: &StepSchedule) -> (f64, f64) {
    sched.steps(spectral_norm(cuu))
}

/// `(h_n, h̃_n)` from a deviation table, using its `J × J` Gram matrix.
pub fn adaptive_steps_from_deviations(t: &DMatrix<f64>, sched: &StepSchedule) -> (f64, f64) {
    sched.steps(covariance_norm(t))
}

/// Kalman-type increment `h C^{uz}(I + h C^{zz})^{-1} R` evaluated in
/// ensemble space as `a T (I_J + a YᵀY)^{-1} Yᵀ R` with `a = h/(J−1)`.
/// `t` and `y` are centred deviation tables; `residuals` has one column per
/// right-hand side.
pub(crate) fn kalman_increment(
    t: &DMatrix<f64>,
    y: &DMatrix<f64>,
    h: f64,
    residuals: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let j = t.ncols();
    if j < 2 {
        return Err(Error::EnsembleTooSmall(j));
    }
    let a = h / (j as f64 - 1.0);
    let gram = y.transpose() * y;
    let proj = y.transpose() * residuals;
    let coef = solve_shifted_psd(&gram, a, &proj)?;
    Ok(t * coef * a)
}

pub(crate) fn column(v: &DVector<f64>, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(v.len(), ncols, |i, _| v[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_step_examples() {
        let s = StepSchedule::new(0.25, 2.5, 0.0).unwrap();
        assert_eq!(adaptive_steps(&DMatrix::identity(3, 3), &s), (0.25, 2.5));
        let s = StepSchedule::new(0.25, 2.5, 1e-12).unwrap();
        let (h, ht) = adaptive_steps(&DMatrix::zeros(2, 2), &s);
        assert_eq!((h, ht), (0.25e12, 2.5e12));
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = StepSchedule::new(0.3, 1.5, 0.0).unwrap();
        let (h1, t1) = adaptive_steps(&c, &s);
        let (h2, t2) = adaptive_steps(&(&c * 4.0), &s);
        assert!((h1 / h2 - 4.0).abs() < 1e-12 && (t1 / t2 - 4.0).abs() < 1e-12);
        assert!(StepSchedule::new(0.0, 1.0, 0.0).is_err());
        assert!(StepSchedule::new(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn gram_norm_agrees_with_dense() {
        let t = DMatrix::from_row_slice(3, 3, &[1.0, -2.0, 1.0, 0.5, 0.5, -1.0, 0.0, 1.0, -1.0]);
        let s = StepSchedule::new(0.1, 1.0, 0.0).unwrap();
        let dense = &t * t.transpose() / 2.0;
        let a = adaptive_steps(&dense, &s);
        let b = adaptive_steps_from_deviations(&t, &s);
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }
}
