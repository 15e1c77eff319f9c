//! Localized EKI with a Gaspari–Cohn taper.

use nalgebra::DMatrix;

use super::column;
use crate::ensemble::{centred, Ensemble};
use crate::error::{check_dim, Error, Result};
use crate::forward::RegularizedProblem;
use crate::rng::RngStream;

/// Fifth-order compactly supported Gaspari–Cohn correlation of the
/// normalized distance `z ≥ 0`, supported on `[0, 2)`.
pub fn gaspari_cohn(z: f64) -> f64 {
    let z = z.abs();
    if z <= 1.0 {
        ((((-0.25 * z + 0.5) * z + 0.625) * z - 5.0 / 3.0) * z * z) + 1.0
    } else if z < 2.0 {
        (((((z / 12.0 - 0.5) * z + 0.625) * z + 5.0 / 3.0) * z - 5.0) * z) + 4.0 - 2.0 / (3.0 * z)
    } else {
        0.0
    }
}

/// Taper `Ψ` (`d_u × d_z`) applied entrywise to `C^{uz}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMatrix {
    pub psi: DMatrix<f64>,
    pub r_loc: f64,
    /// Parameter index that most influences each stacked output.
    pub i_o: Vec<usize>,
}

fn periodic_distance(i: usize, k: usize, n: usize) -> usize {
    let d = i.abs_diff(k) % n;
    d.min(n - d)
}

/// Gaspari–Cohn localization on the periodic parameter index circle.
///
/// With `shift = Some(aT)` observation `j` (1-based, at `j/d_y`) maps to the
/// node nearest its departure point `{j/d_y − aT}`; without it observation
/// `j` maps to node `j`. Regularization rows map to their own parameter.
pub fn gaspari_cohn_localization(d_u: usize, d_y: usize, shift: Option<f64>, r_loc: f64) -> Result<LocalizationMatrix> {
    if !(r_loc > 0.0) {
        return Err(Error::invalid("r_loc", format!("must be positive, got {r_loc}")));
    }
    if d_u == 0 {
        return Err(Error::invalid("d_u", "must be positive"));
    }
    let mut i_o = Vec::with_capacity(d_y + d_u);
    for j in 1..=d_y {
        let node = match shift {
            Some(s) => {
                let x = j as f64 / d_y as f64 - s;
                let frac = x - x.floor();
                (d_u as f64 * frac).round() as usize
            }
            None => j,
        };
        // node m sits at m/d_u and is stored at index m − 1
        i_o.push((node + d_u - 1) % d_u);
    }
    i_o.extend(0..d_u);
    let psi = DMatrix::from_fn(d_u, d_y + d_u, |i, c| {
        gaspari_cohn(periodic_distance(i, i_o[c], d_u) as f64 / r_loc)
    });
    Ok(LocalizationMatrix { psi, r_loc, i_o })
}

/// `−h (Ψ ∘ C^{uz}) R` for residual columns `R = H(u⁽ʲ⁾) − z`.
pub fn localized_drift(cuz: &DMatrix<f64>, psi: &DMatrix<f64>, residuals: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>> {
    if cuz.shape() != psi.shape() {
        return Err(Error::DimensionMismatch {
            context: "localization matrix",
            expected: cuz.ncols(),
            found: psi.ncols(),
        });
    }
    check_dim("localized residuals", cuz.ncols(), residuals.nrows())?;
    Ok(cuz.component_mul(psi) * residuals * (-h))
}

/// One localized step
/// `u⁽ʲ⁾ ← u⁽ʲ⁾ − h (Ψ∘C^{uz})(H(u⁽ʲ⁾) − z) + σ² ξ⁽ʲ⁾`. The noise is
/// `ξ⁽ʲ⁾ = η⁽ʲ⁾ + d ∘ τ⁽ʲ⁾` with `η⁽ʲ⁾ ~ N(0, I)` and `d` chosen so the
/// symmetrized cross-covariance of `ξ` and `τ` has unit diagonal wherever
/// the ensemble has spread. `J` queries.
pub fn leki_step(
    e: &Ensemble,
    p: &RegularizedProblem,
    loc: &LocalizationMatrix,
    h: f64,
    sigma: f64,
    stream: &mut RngStream,
) -> Result<Ensemble> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", format!("step must be positive and finite, got {h}")));
    }
    let j = e.size();
    let images = p.apply_columns(e.members())?;
    let (_, t) = e.mean_and_deviations();
    let y = centred(&images);
    let cuz = &t * y.transpose() / (j as f64 - 1.0);
    let residuals = &images - column(&p.target(), j);
    let mut out = e.members() + localized_drift(&cuz, &loc.psi, &residuals, h)?;
    if sigma > 0.0 {
        let du = e.dim();
        let eta = DMatrix::from_fn(du, j, |_, _| stream.normal());
        let s2 = sigma * sigma;
        for s in 0..du {
            let css: f64 = t.row(s).norm_squared() / (j as f64 - 1.0);
            let cross: f64 = eta.row(s).dot(&t.row(s)) / (j as f64 - 1.0);
            let d = if css > 0.0 { (0.5 - cross) / css } else { 0.0 };
            for k in 0..j {
                out[(s, k)] += s2 * (eta[(s, k)] + d * t[(s, k)]);
            }
        }
    }
    Ensemble::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::gaussian_init;
    use crate::forward::{ForwardModel, LinearMap, Regularizer};
    use crate::rng::Purpose;
    use nalgebra::DVector;

    #[test]
    fn gaspari_cohn_values() {
        assert_eq!(gaspari_cohn(0.0), 1.0);
        assert!((gaspari_cohn(1.0) - 5.0 / 24.0).abs() < 1e-15);
        assert_eq!(gaspari_cohn(2.0), 0.0);
        assert_eq!(gaspari_cohn(3.5), 0.0);
        // continuity at the knot and monotone decay
        assert!((gaspari_cohn(1.0 - 1e-9) - gaspari_cohn(1.0 + 1e-9)).abs() < 1e-8);
        let xs: Vec<f64> = (0..200).map(|i| i as f64 * 0.01).collect();
        assert!(xs.windows(2).all(|w| gaspari_cohn(w[1]) <= gaspari_cohn(w[0]) + 1e-15));
    }

    #[test]
    fn localization_structure() {
        let loc = gaspari_cohn_localization(12, 12, None, 1.5).unwrap();
        assert_eq!(loc.psi.shape(), (12, 24));
        for c in 0..24 {
            assert_eq!(loc.psi[(loc.i_o[c], c)], 1.0);
        }
        assert!(loc.psi.iter().all(|&x| (0.0..=1.0).contains(&x)));
        // periodic wrap: node 12 sits next to node 1
        assert!(loc.psi[(0, 11)] > 0.0);
        // distance 3 = 2 r_loc is outside the support
        assert_eq!(loc.psi[(3, 0)], 0.0);
        let shifted = gaspari_cohn_localization(12, 12, Some(0.25), 1.5).unwrap();
        assert_eq!(shifted.i_o[0], (1 + 12 - 3 + 12 - 1) % 12);
        assert!(gaspari_cohn_localization(4, 4, None, 0.0).is_err());
    }

    fn linear_problem() -> RegularizedProblem {
        RegularizedProblem::new(
            ForwardModel::new(LinearMap::new(DMatrix::from_fn(3, 4, |i, j| (i + j) as f64 * 0.3 - 0.4))),
            Regularizer::scaled_identity(4, 0.2).unwrap(),
            DVector::from_vec(vec![1.0, 0.0, -1.0]),
        )
        .unwrap()
    }

    #[test]
    fn unit_taper_is_plain_drift() {
        let p = linear_problem();
        let e = gaussian_init(4, 5, 1.0, 2).unwrap();
        let loc = LocalizationMatrix {
            psi: DMatrix::from_element(4, 7, 1.0),
            r_loc: 1.0,
            i_o: vec![0; 7],
        };
        let mut s = RngStream::new(0, Purpose::LocalizationNoise, 0);
        let out = leki_step(&e, &p, &loc, 0.3, 0.0, &mut s).unwrap();
        let images = p.unmetered().apply_columns(e.members()).unwrap();
        let (_, t) = e.mean_and_deviations();
        let cuz = &t * centred(&images).transpose() / 4.0;
        let expected = e.members() - cuz * (&images - column(&p.target(), 5)) * 0.3;
        assert!((out.members() - expected).amax() < 1e-12);
        let zero = LocalizationMatrix {
            psi: DMatrix::zeros(4, 7),
            ..loc
        };
        assert_eq!(leki_step(&e, &p, &zero, 0.3, 0.0, &mut s).unwrap(), e);
    }

    #[test]
    fn hadamard_selects_coordinates() {
        let cuz = DMatrix::from_row_slice(2, 1, &[0.5, 0.7]);
        let psi = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let r = DMatrix::from_row_slice(1, 2, &[1.0, -2.0]);
        let d = localized_drift(&cuz, &psi, &r, 1.0).unwrap();
        assert_eq!(d.row(1).amax(), 0.0);
        assert_eq!(d[(0, 0)], -0.5);
        assert_eq!(d[(0, 1)], 1.0);
    }

    #[test]
    fn noise_cross_covariance_has_unit_diagonal() {
        let p = linear_problem();
        let e = gaussian_init(4, 6, 1.0, 8).unwrap();
        let loc = LocalizationMatrix {
            psi: DMatrix::zeros(4, 7),
            r_loc: 1.0,
            i_o: vec![0; 7],
        };
        let sigma = 0.5;
        let mut s = RngStream::new(3, Purpose::LocalizationNoise, 0);
        let out = leki_step(&e, &p, &loc, 0.1, sigma, &mut s).unwrap();
        let xi = (out.members() - e.members()) / (sigma * sigma);
        let (_, t) = e.mean_and_deviations();
        let sym = (&xi * t.transpose() + &t * xi.transpose()) / 5.0;
        for i in 0..4 {
            assert!((sym[(i, i)] - 1.0).abs() < 1e-10);
        }
    }
}
