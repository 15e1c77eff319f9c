//! Tikhonov EKI and the naive dropout variant.

use nalgebra::DMatrix;

use super::{column, kalman_increment};
use crate::ensemble::{centred, DropoutMask, Ensemble};
use crate::error::{Error, Result};
use crate::forward::RegularizedProblem;

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("h", format!("step must be positive and finite, got {h}")))
    }
}

/// `u⁽ʲ⁾ ← u⁽ʲ⁾ + h C^{uz}(h C^{zz} + I)^{-1}(z − H(u⁽ʲ⁾))`. `J` queries.
pub fn eki_step(e: &Ensemble, p: &RegularizedProblem, h: f64) -> Result<Ensemble> {
    check_step(h)?;
    let images = p.apply_columns(e.members())?;
    let (_, t) = e.mean_and_deviations();
    let y = centred(&images);
    let residuals = column(&p.target(), e.size()) - &images;
    let inc = kalman_increment(&t, &y, h, &residuals)?;
    Ensemble::new(e.members() + inc)
}

/// EKI step whose covariances come from the dropout ensemble while the
/// residuals use the undropped members. `2J` queries.
pub fn naive_deki_step(e: &Ensemble, p: &RegularizedProblem, h: f64, mask: &DropoutMask) -> Result<Ensemble> {
    check_step(h)?;
    let images = p.apply_columns(e.members())?;
    let (mean, t) = e.mean_and_deviations();
    let t_drop = mask.apply_to_columns(&t)?;
    let dropped = column(&mean, e.size()) + &t_drop;
    let y_drop = centred(&p.apply_columns(&dropped)?);
    let residuals = column(&p.target(), e.size()) - &images;
    let inc = kalman_increment(&t_drop, &y_drop, h, &residuals)?;
    Ensemble::new(e.members() + inc)
}

/// Dense reference of [`eki_step`] for tests: forms the covariance blocks
/// explicitly.
pub fn eki_step_dense(e: &Ensemble, p: &RegularizedProblem, h: f64) -> Result<Ensemble> {
    let images = p.apply_columns(e.members())?;
    let c = crate::ensemble::empirical_covariances(e, &images)?;
    let dz = images.nrows();
    let k = &c.czz * h + DMatrix::identity(dz, dz);
    let gain = c.cuz * h * k.try_inverse().ok_or(Error::Singular { context: "dense EKI" })?;
    let residuals = column(&p.target(), e.size()) - &images;
    Ensemble::new(e.members() + gain * residuals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::gaussian_init;
    use crate::forward::{ForwardModel, LinearMap, Regularizer};
    use nalgebra::DVector;

    fn scalar_identity_problem(z: f64) -> RegularizedProblem {
        // H(u) = u with a zero regularizer block dropped: G = 1, C0^{-1/2} = 0
        RegularizedProblem::new(
            ForwardModel::new(LinearMap::new(DMatrix::from_element(1, 1, 1.0))),
            Regularizer::scaled_identity(1, 0.0).unwrap(),
            DVector::from_element(1, z),
        )
        .unwrap()
    }

    fn two_members() -> Ensemble {
        Ensemble::new(DMatrix::from_row_slice(1, 2, &[0.0, 2.0])).unwrap()
    }

    #[test]
    fn scalar_hand_example() {
        let p = scalar_identity_problem(3.0);
        let e = eki_step(&two_members(), &p, 1.0).unwrap();
        assert!((e.members()[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((e.members()[(0, 1)] - 8.0 / 3.0).abs() < 1e-14);
        assert_eq!(p.query_count(), 2);
        let n = naive_deki_step(&two_members(), &p, 1.0, &DropoutMask::ones(1)).unwrap();
        assert!((n.members() - e.members()).amax() < 1e-14);
    }

    #[test]
    fn fixed_points() {
        let p = scalar_identity_problem(3.0);
        let same = Ensemble::new(DMatrix::from_element(1, 3, 1.5)).unwrap();
        assert_eq!(eki_step(&same, &p, 1.0).unwrap(), same);
        let p0 = scalar_identity_problem(0.0);
        let e = Ensemble::new(DMatrix::from_row_slice(1, 2, &[0.0, 0.0])).unwrap();
        assert_eq!(eki_step(&e, &p0, 1.0).unwrap(), e);
        assert!(eki_step(&e, &p0, 0.0).is_err());
    }

    #[test]
    fn zero_mask_leaves_ensemble() {
        let p = scalar_identity_problem(3.0);
        let e = naive_deki_step(&two_members(), &p, 1.0, &DropoutMask::zeros(1)).unwrap();
        assert_eq!(e, two_members());
        assert_eq!(p.query_count(), 4);
    }

    #[test]
    fn factor_form_matches_dense() {
        let g = DMatrix::from_fn(4, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let p = RegularizedProblem::new(
            ForwardModel::new(LinearMap::new(g)),
            Regularizer::scaled_identity(6, 0.3).unwrap(),
            DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0]),
        )
        .unwrap();
        let e = gaussian_init(6, 5, 1.0, 4).unwrap();
        let a = eki_step(&e, &p, 0.7).unwrap();
        let b = eki_step_dense(&e, &p, 0.7).unwrap();
        assert!((a.members() - b.members()).amax() < 1e-12);
    }
}
