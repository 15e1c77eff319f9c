//! Distance between the dropout mean step and its Gauss–Newton counterpart.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::forward::RegularizedProblem;
use crate::linalg::{covariance_norm, solve_shifted_psd};
use crate::schemes::RunRecord;

/// `ū' = ū + h̃ C̃ Gᵀ(I + h̃ G C̃ Gᵀ)^{-1}(z − H(ū))` with `G` the Jacobian
/// of the stacked map at `ū`.
pub fn gauss_newton_reference(
    mean: &DVector<f64>,
    c_drop: &DMatrix<f64>,
    jacobian: &DMatrix<f64>,
    htilde: f64,
    z: &DVector<f64>,
    h_mean: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("Gauss-Newton covariance", mean.len(), c_drop.nrows())?;
    check_dim("Gauss-Newton jacobian columns", mean.len(), jacobian.ncols())?;
    check_dim("Gauss-Newton jacobian rows", z.len(), jacobian.nrows())?;
    check_dim("Gauss-Newton image", z.len(), h_mean.len())?;
    let cg = c_drop * jacobian.transpose();
    let inner = jacobian * &cg;
    let r = DMatrix::from_column_slice(z.len(), 1, (z - h_mean).as_slice());
    let k = solve_shifted_psd(&inner, htilde, &r)?;
    Ok(mean + (cg * k).column(0) * htilde)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearizationMargin {
    /// Index `n` of the step `n → n+1`.
    pub step: usize,
    /// `‖ū_{n+1} − ū'_{n+1}‖`.
    pub distance: f64,
    /// `(J−1)^{3/2} H h̃_n ‖C̃_n‖^{3/2} ‖z − H(ū_n)‖`.
    pub bound: f64,
    pub passed: bool,
}

/// Per-step check of the Gauss–Newton approximation bound on a DEKI run
/// recorded with snapshots. `hessian_bound` is the constant `H` of the
/// forward map; Jacobians are analytic when the map provides them and
/// central differences with step `1e-6` otherwise.
pub fn audit_linearization_error(run: &RunRecord, problem: &RegularizedProblem, hessian_bound: f64) -> Result<Vec<LinearizationMargin>> {
    if !(hessian_bound >= 0.0) {
        return Err(Error::invalid("hessian_bound", format!("must be nonnegative, got {hessian_bound}")));
    }
    let snaps = run
        .snapshots
        .as_ref()
        .ok_or_else(|| Error::MissingData("linearization audit needs per-step snapshots".into()))?;
    let n = run.steps.len();
    if snaps.means.len() != n + 1 || snaps.dropout_deviations.len() != n || snaps.htilde.len() != n {
        return Err(Error::MissingData("linearization audit needs means, dropout deviations and mean steps for every step".into()));
    }
    let j1 = run.ensemble_size as f64 - 1.0;
    let big_c = j1.powf(1.5) * hessian_bound;
    let z = problem.target();
    let plain = problem.unmetered();
    (0..n)
        .map(|k| {
            let mean = &snaps.means[k];
            let td = &snaps.dropout_deviations[k];
            let ht = snaps.htilde[k];
            let c_drop = td * td.transpose() / j1;
            let h_mean = plain.apply(mean)?;
            let jac = problem.jacobian(mean, 1e-6)?;
            let reference = gauss_newton_reference(mean, &c_drop, &jac, ht, &z, &h_mean)?;
            let distance = (&snaps.means[k + 1] - reference).norm();
            let bound = big_c * ht * covariance_norm(td).powf(1.5) * (&z - h_mean).norm();
            Ok(LinearizationMargin {
                step: k,
                distance,
                bound,
                passed: bound - distance >= -1e-10,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{gaussian_init, Ensemble};
    use crate::forward::{ForwardModel, LinearMap, QuadraticMap, Regularizer};
    use crate::rng::{Purpose, RngStream};
    use crate::schemes::{deki_iterate, RunOptions, StepSchedule};

    #[test]
    fn scalar_quadratic_by_hand() {
        // H(u) = u², ū = 1, G = 2, C̃ = 1, h̃ = 1, z − H(ū) = 1: ū' = 1 + 2/5
        let one = DMatrix::from_element(1, 1, 1.0);
        let g = DMatrix::from_element(1, 1, 2.0);
        let u = gauss_newton_reference(&DVector::from_element(1, 1.0), &one, &g, 1.0, &DVector::from_element(1, 2.0), &DVector::from_element(1, 1.0)).unwrap();
        assert!((u[0] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_fixed() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let g = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, 0.1, 0.1]);
        let m = DVector::from_vec(vec![0.3, -0.2]);
        let z = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(gauss_newton_reference(&m, &c, &g, 0.7, &z, &z).unwrap(), m);
    }

    fn opts(n: usize, seed: u64) -> RunOptions {
        RunOptions {
            n_steps: n,
            seed,
            snapshots: true,
        }
    }

    #[test]
    fn linear_map_has_zero_distance() {
        let mut s = RngStream::new(2, Purpose::Trial, 0);
        let g = DMatrix::from_fn(4, 6, |_, _| s.normal());
        let p = RegularizedProblem::new(ForwardModel::new(LinearMap::new(g)), Regularizer::scaled_identity(6, 0.5).unwrap(), DVector::from_element(4, 1.0)).unwrap();
        let e = gaussian_init(6, 4, 1.0, 2).unwrap();
        let sched = StepSchedule::new(0.1, 1.0, 1e-12).unwrap();
        let run = deki_iterate(&p, &e, 0.5, None, &sched, opts(10, 2)).unwrap();
        let margins = audit_linearization_error(&run, &p, 0.0).unwrap();
        assert_eq!(margins.len(), 10);
        for m in margins {
            assert!(m.passed && m.distance < 1e-10, "{m:?}");
        }
    }

    #[test]
    fn scalar_quadratic_run() {
        // H(u) = u + 0.05 u², Hessian 0.1
        let q = QuadraticMap::new(DMatrix::from_element(1, 1, 1.0), vec![DMatrix::from_element(1, 1, 0.1)]).unwrap();
        let hb = q.hessian_bound();
        assert!((hb - 0.1).abs() < 1e-15);
        let p = RegularizedProblem::new(ForwardModel::new(q), Regularizer::scaled_identity(1, 0.5).unwrap(), DVector::from_element(1, 2.0)).unwrap();
        let e = Ensemble::new(DMatrix::from_row_slice(1, 3, &[0.2, 0.5, 1.1])).unwrap();
        let sched = StepSchedule::new(0.1, 1.0, 1e-12).unwrap();
        let run = deki_iterate(&p, &e, 0.5, None, &sched, opts(8, 5)).unwrap();
        let margins = audit_linearization_error(&run, &p, hb).unwrap();
        assert!(margins.iter().all(|m| m.passed), "{margins:?}");
        // fault injection: push the recorded mean far from its reference
        let mut bad = run.clone();
        let snaps = bad.snapshots.as_mut().unwrap();
        let k = margins.iter().position(|m| m.bound > 0.0).unwrap();
        let d = &snaps.means[k + 1] - &snaps.means[k];
        snaps.means[k + 1] = &snaps.means[k] + d * 1e3 + DVector::from_element(1, 1.0);
        let m = audit_linearization_error(&bad, &p, hb).unwrap();
        assert!(!m[k].passed);
    }
}
