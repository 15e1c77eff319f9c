//! Multi-step driver and per-step records.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::deki::{deki_deviation_step, mean_increment};
use super::leki::{leki_step, LocalizationMatrix};
use super::linearize::{linearize, untruncated_norm};
use super::{column, kalman_increment, StepSchedule};
use crate::ensemble::{centred, sample_mask, DropoutMask, Ensemble};
use crate::error::{Error, Result};
use crate::forward::RegularizedProblem;
use crate::linalg::{covariance_norm, singular_values, RANK_RTOL};
use crate::rng::{Purpose, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    /// Tikhonov EKI with step `h̃_n`.
    Eki,
    /// EKI with dropout covariances, step `h̃_n`.
    NaiveDeki { keep_rate: f64 },
    /// Separated mean/deviation updates. `m_g = None` picks ten times the
    /// untruncated linearization norm at step 0.
    Deki { keep_rate: f64, m_g: Option<f64> },
    /// Localized EKI with step `h_n` and noise level `sigma`.
    Leki { localization: LocalizationMatrix, sigma: f64 },
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Eki => "eki",
            Scheme::NaiveDeki { .. } => "naive-deki",
            Scheme::Deki { .. } => "deki",
            Scheme::Leki { .. } => "leki",
        }
    }

    /// Forward queries per step.
    pub fn queries_per_step(&self, j: usize) -> u64 {
        match self {
            Scheme::Eki | Scheme::Leki { .. } => j as u64,
            Scheme::NaiveDeki { .. } => 2 * j as u64,
            Scheme::Deki { .. } => 2 * j as u64 + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub n_steps: usize,
    pub seed: u64,
    pub snapshots: bool,
}

/// Metrics of the state after `step` iterations. Step sizes are the ones
/// computed from that state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub residual_norm: f64,
    pub cov_norm: f64,
    pub diag_min: f64,
    pub diag_max: f64,
    pub rank: usize,
    pub kappa: f64,
    pub h: f64,
    pub htilde: f64,
    /// Cumulative algorithm queries.
    pub queries: u64,
}

/// Full per-step state, recorded on request for offline audits.
#[derive(Debug, Clone, Default)]
pub struct Snapshots {
    /// Deviations `T_k`, `k = 0..=n`.
    pub deviations: Vec<DMatrix<f64>>,
    /// Means `ū_k`, `k = 0..=n`.
    pub means: Vec<DVector<f64>>,
    /// Residuals `z − H(ū_k)`, `k = 0..=n`.
    pub residuals: Vec<DVector<f64>>,
    /// Masks used in step `k → k+1`.
    pub masks: Vec<DropoutMask>,
    /// Dropout deviations `ρ ∘ T_k`.
    pub dropout_deviations: Vec<DMatrix<f64>>,
    pub h: Vec<f64>,
    pub htilde: Vec<f64>,
    /// `(γ_k², M_k²)`: extreme eigenvalues of `H_kᵀ H_k`.
    pub curvature: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub scheme: String,
    pub seed: u64,
    pub ensemble_size: usize,
    pub initial: StepMetrics,
    /// Metrics after steps `1..=n`.
    pub steps: Vec<StepMetrics>,
    pub final_ensemble: Ensemble,
    pub m_g: Option<f64>,
    pub snapshots: Option<Snapshots>,
}

impl RunRecord {
    /// Initial metrics followed by the per-step metrics.
    pub fn all_metrics(&self) -> impl Iterator<Item = &StepMetrics> {
        std::iter::once(&self.initial).chain(self.steps.iter())
    }

    pub fn final_metrics(&self) -> &StepMetrics {
        self.steps.last().unwrap_or(&self.initial)
    }

    pub fn final_mean(&self) -> DVector<f64> {
        self.final_ensemble.mean()
    }
}

struct Spectrum {
    norm: f64,
    rank: usize,
    kappa: f64,
    diag_min: f64,
    diag_max: f64,
}

fn spectrum(t: &DMatrix<f64>) -> Spectrum {
    let j = t.ncols() as f64 - 1.0;
    let diag: Vec<f64> = t.row_iter().map(|r| r.norm_squared() / j).collect();
    let diag_min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let diag_max = diag.iter().cloned().fold(0.0, f64::max);
    let sv = singular_values(t);
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let kept: Vec<f64> = sv.iter().cloned().filter(|&s| smax > 0.0 && s > RANK_RTOL * smax).collect();
    let smin = kept.iter().cloned().fold(f64::INFINITY, f64::min);
    Spectrum {
        norm: smax * smax / j,
        rank: kept.len(),
        kappa: if kept.is_empty() { 1.0 } else { (smax / smin).powi(2) },
        diag_min,
        diag_max,
    }
}

struct Evaluator {
    metrics_problem: RegularizedProblem,
    z: DVector<f64>,
}

impl Evaluator {
    fn metrics(&self, step: usize, mean: &DVector<f64>, t: &DMatrix<f64>, sched: &StepSchedule, queries: u64) -> Result<(StepMetrics, DVector<f64>)> {
        let img = self.metrics_problem.apply(mean)?;
        let r = &self.z - img;
        let sp = spectrum(t);
        let (h, htilde) = sched.steps(covariance_norm(t));
        Ok((
            StepMetrics {
                step,
                loss: 0.5 * r.norm_squared(),
                residual_norm: r.norm(),
                cov_norm: sp.norm,
                diag_min: sp.diag_min,
                diag_max: sp.diag_max,
                rank: sp.rank,
                kappa: sp.kappa,
                h,
                htilde,
                queries,
            },
            r,
        ))
    }
}

/// Runs `opts.n_steps` iterations of `scheme` from `init`.
pub fn iterate(
    problem: &RegularizedProblem,
    init: &Ensemble,
    scheme: &Scheme,
    sched: &StepSchedule,
    opts: RunOptions,
) -> Result<RunRecord> {
    if init.dim() != problem.d_u() {
        return Err(Error::DimensionMismatch {
            context: "initial ensemble",
            expected: problem.d_u(),
            found: init.dim(),
        });
    }
    match scheme {
        Scheme::NaiveDeki { keep_rate } | Scheme::Deki { keep_rate, .. } => {
            if !(*keep_rate > 0.0 && *keep_rate < 1.0) {
                return Err(Error::invalid("keep_rate", format!("must lie in (0, 1), got {keep_rate}")));
            }
        }
        Scheme::Leki { localization, .. } => {
            if localization.psi.shape() != (problem.d_u(), problem.d_z()) {
                return Err(Error::DimensionMismatch {
                    context: "localization matrix columns",
                    expected: problem.d_z(),
                    found: localization.psi.ncols(),
                });
            }
        }
        Scheme::Eki => {}
    }
    let j = init.size();
    let base_queries = problem.query_count();
    let eval = Evaluator {
        metrics_problem: problem.unmetered(),
        z: problem.target(),
    };
    let (mut mean, mut t) = init.mean_and_deviations();
    let (initial, r0) = eval.metrics(0, &mean, &t, sched, 0)?;
    let mut snaps = opts.snapshots.then(|| Snapshots {
        deviations: vec![t.clone()],
        means: vec![mean.clone()],
        residuals: vec![r0],
        ..Snapshots::default()
    });
    let mut steps = Vec::with_capacity(opts.n_steps);
    let mut m_g = match scheme {
        Scheme::Deki { m_g, .. } => *m_g,
        _ => None,
    };
    if let Some(m) = m_g {
        if !(m > 0.0) {
            return Err(Error::invalid("M_G", format!("must be positive, got {m}")));
        }
    }
    let z = problem.target();
    for k in 0..opts.n_steps {
        let cov = covariance_norm(&t);
        let (h, htilde) = sched.steps(cov);
        let step = || -> Result<(DVector<f64>, DMatrix<f64>)> {
            match scheme {
                Scheme::Eki => {
                    let members = column(&mean, j) + &t;
                    let images = problem.apply_columns(&members)?;
                    let inc = kalman_increment(&t, &centred(&images), htilde, &(column(&z, j) - &images))?;
                    let e = Ensemble::new(members + inc)?;
                    Ok(e.mean_and_deviations())
                }
                Scheme::NaiveDeki { keep_rate } => {
                    let members = column(&mean, j) + &t;
                    let images = problem.apply_columns(&members)?;
                    let mut stream = RngStream::new(opts.seed, Purpose::Mask, k as u64);
                    let mask = sample_mask(*keep_rate, t.nrows(), &mut stream)?;
                    let t_drop = mask.apply_to_columns(&t)?;
                    let y_drop = centred(&problem.apply_columns(&(column(&mean, j) + &t_drop))?);
                    let inc = kalman_increment(&t_drop, &y_drop, htilde, &(column(&z, j) - &images))?;
                    let e = Ensemble::new(members + inc)?;
                    Ok(e.mean_and_deviations())
                }
                Scheme::Leki { localization, sigma } => {
                    let e = Ensemble::from_parts(&mean, &t)?;
                    let mut stream = RngStream::new(opts.seed, Purpose::LocalizationNoise, k as u64);
                    let next = leki_step(&e, problem, localization, h, *sigma, &mut stream)?;
                    Ok(next.mean_and_deviations())
                }
                Scheme::Deki { .. } => unreachable!("handled separately"),
            }
        };
        let (new_mean, new_t) = if let Scheme::Deki { keep_rate, .. } = scheme {
            let model = problem.model();
            let members = column(&mean, j) + &t;
            let yg = centred(&model.evaluate_columns(&members).map_err(|e| e.at_step(k + 1))?);
            let bound = match m_g {
                Some(m) => m,
                None => {
                    let b = untruncated_norm(&t, &yg).map_err(|e| e.at_step(k + 1))?;
                    let m = if b > 0.0 { 10.0 * b } else { 1.0 };
                    m_g = Some(m);
                    m
                }
            };
            let mut stream = RngStream::new(opts.seed, Purpose::Mask, k as u64);
            let mask = sample_mask(*keep_rate, t.nrows(), &mut stream)?;
            let t_drop = mask.apply_to_columns(&t)?;
            let dropped = column(&mean, j) + &t_drop;
            let yd = centred(&problem.apply_columns(&dropped).map_err(|e| e.at_step(k + 1))?);
            let r = &z - problem.apply(&mean).map_err(|e| e.at_step(k + 1))?;
            let new_mean = &mean + mean_increment(&t_drop, &yd, htilde, &r).map_err(|e| e.at_step(k + 1))?;
            let lin = linearize(&t, &yg, problem.regularizer(), bound).map_err(|e| e.at_step(k + 1))?;
            // Re-centre: roundoff in the centred images is absolute, so once the
            // spread is tiny it leaks into the all-ones direction and lifts the rank.
            let new_t = centred(&deki_deviation_step(&t, &lin, h).map_err(|e| e.at_step(k + 1))?);
            if let Some(s) = snaps.as_mut() {
                s.masks.push(mask);
                s.dropout_deviations.push(t_drop);
                s.curvature.push(lin.curvature_bounds(problem.regularizer()));
            }
            (new_mean, new_t)
        } else {
            step().map_err(|e| e.at_step(k + 1))?
        };
        mean = new_mean;
        t = new_t;
        let queries = problem.query_count() - base_queries;
        let (m, r) = eval.metrics(k + 1, &mean, &t, sched, queries).map_err(|e| e.at_step(k + 1))?;
        if let Some(s) = snaps.as_mut() {
            s.h.push(h);
            s.htilde.push(htilde);
            s.deviations.push(t.clone());
            s.means.push(mean.clone());
            s.residuals.push(r);
        }
        steps.push(m);
    }
    let final_ensemble = if steps.is_empty() {
        init.clone()
    } else {
        Ensemble::from_parts(&mean, &t)?
    };
    Ok(RunRecord {
        scheme: scheme.name().to_string(),
        seed: opts.seed,
        ensemble_size: j,
        initial,
        steps,
        final_ensemble,
        m_g,
        snapshots: snaps,
    })
}

/// DEKI for `opts.n_steps` iterations.
pub fn deki_iterate(
    problem: &RegularizedProblem,
    init: &Ensemble,
    keep_rate: f64,
    m_g: Option<f64>,
    sched: &StepSchedule,
    opts: RunOptions,
) -> Result<RunRecord> {
    iterate(problem, init, &Scheme::Deki { keep_rate, m_g }, sched, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::gaussian_init;
    use crate::forward::{ForwardModel, LinearMap, Regularizer};
    use crate::schemes::deki::{deviation_step_inverse, deki_mean_step};
    use crate::ensemble::CovarianceBundle;

    fn linear_problem(du: usize, dy: usize, seed: u64) -> RegularizedProblem {
        let mut s = RngStream::new(seed, Purpose::Trial, 0);
        let g = DMatrix::from_fn(dy, du, |_, _| s.normal() / (du as f64).sqrt());
        let y = DVector::from_fn(dy, |_, _| s.normal());
        RegularizedProblem::new(
            ForwardModel::new(LinearMap::new(g)),
            Regularizer::scaled_identity(du, 0.5).unwrap(),
            y,
        )
        .unwrap()
    }

    fn opts(n: usize, seed: u64) -> RunOptions {
        RunOptions {
            n_steps: n,
            seed,
            snapshots: true,
        }
    }

    #[test]
    fn zero_steps_empty_record() {
        let p = linear_problem(4, 3, 1);
        let e = gaussian_init(4, 3, 1.0, 1).unwrap();
        let s = StepSchedule::new(0.1, 1.0, 1e-12).unwrap();
        let r = deki_iterate(&p, &e, 0.5, None, &s, opts(0, 1)).unwrap();
        assert!(r.steps.is_empty());
        assert_eq!(r.final_ensemble, e);
        assert_eq!(p.query_count(), 0);
    }

    #[test]
    fn query_accounting() {
        let s = StepSchedule::new(0.1, 1.0, 1e-12).unwrap();
        for (scheme, per) in [
            (Scheme::Eki, 5u64),
            (Scheme::NaiveDeki { keep_rate: 0.5 }, 10),
            (Scheme::Deki { keep_rate: 0.5, m_g: None }, 11),
        ] {
            let p = linear_problem(6, 4, 2);
            let e = gaussian_init(6, 5, 1.0, 3).unwrap();
            let r = iterate(&p, &e, &scheme, &s, opts(7, 3)).unwrap();
            assert_eq!(p.query_count(), 7 * per, "{}", scheme.name());
            assert_eq!(r.final_metrics().queries, 7 * per);
            assert_eq!(scheme.queries_per_step(5), per);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let s = StepSchedule::new(0.1, 1.0, 1e-12).unwrap();
        let p = linear_problem(6, 4, 2);
        let e = gaussian_init(6, 4, 1.0, 3).unwrap();
        let a = deki_iterate(&p, &e, 0.5, None, &s, opts(10, 9)).unwrap();
        let b = deki_iterate(&p, &e, 0.5, None, &s, opts(10, 9)).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.final_ensemble, b.final_ensemble);
    }

    #[test]
    fn near_one_keep_rate_matches_unmasked_reference() {
        let p = linear_problem(5, 3, 4);
        let e = gaussian_init(5, 4, 1.0, 5).unwrap();
        let s = StepSchedule::new(0.2, 1.0, 1e-12).unwrap();
        let r = deki_iterate(&p, &e, 1.0 - 1e-9, Some(1e6), &s, opts(1, 6)).unwrap();
        // reference: undropped covariances for the mean, exact linear map for deviations
        let q = p.unmetered();
        let (mean, t) = e.mean_and_deviations();
        let images = q.apply_columns(e.members()).unwrap();
        let bundle = CovarianceBundle::from_deviations(&t, &centred(&images)).unwrap();
        let (h, ht) = s.steps(covariance_norm(&t));
        let m1 = deki_mean_step(&mean, &bundle, ht, &q.target(), &q.apply(&mean).unwrap()).unwrap();
        let g = q.model().map().matrix().unwrap();
        let mut hm = DMatrix::zeros(8, 5);
        hm.rows_mut(0, 3).copy_from(&g);
        hm.rows_mut(3, 5).copy_from(&q.regularizer().to_dense());
        let t1 = deviation_step_inverse(&t, &bundle.cuu, &hm, h).unwrap();
        let (rm, rt) = r.final_ensemble.mean_and_deviations();
        assert!((rm - m1).amax() < 1e-6);
        assert!((rt - t1).amax() < 1e-6);
    }

    #[test]
    fn scalar_problem_converges() {
        let p = RegularizedProblem::new(
            ForwardModel::new(LinearMap::new(DMatrix::from_element(1, 1, 1.0))),
            Regularizer::scaled_identity(1, 1.0).unwrap(),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let (_, lmin) = p.optimal_solution().unwrap();
        let e = gaussian_init(1, 2, 1.0, 7).unwrap();
        let s = StepSchedule::new(0.25, 0.5, 1e-12).unwrap();
        let r = deki_iterate(&p, &e, 0.5, None, &s, opts(60, 7)).unwrap();
        let e_n = (r.final_metrics().loss - lmin).max(0.0);
        assert!(e_n < 1e-6, "e_n {e_n}");
    }

    #[test]
    fn rank_and_column_space_invariant() {
        let p = linear_problem(10, 6, 8);
        let e = gaussian_init(10, 5, 1.0, 8).unwrap();
        let s = StepSchedule::new(0.25, 2.5, 1e-12).unwrap();
        let r = deki_iterate(&p, &e, 0.5, None, &s, opts(30, 8)).unwrap();
        assert!(r.all_metrics().all(|m| m.rank == 4));
        let snaps = r.snapshots.unwrap();
        let v0 = crate::linalg::rank_factor(&snaps.deviations[0], RANK_RTOL).basis;
        let p0 = &v0 * v0.transpose();
        for t in &snaps.deviations {
            let v = crate::linalg::rank_factor(t, RANK_RTOL).basis;
            let drift = crate::linalg::spectral_norm(&(&v * v.transpose() - &p0));
            assert!(drift < 1e-8, "drift {drift}");
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        let p = linear_problem(4, 3, 1);
        let e = gaussian_init(4, 3, 1.0, 1).unwrap();
        let s = StepSchedule::new(0.1, 1.0, 1e-12).unwrap();
        assert!(deki_iterate(&p, &e, 1.0, None, &s, opts(1, 1)).is_err());
        assert!(deki_iterate(&p, &e, 0.5, Some(-1.0), &s, opts(1, 1)).is_err());
        let wrong = gaussian_init(5, 3, 1.0, 1).unwrap();
        assert!(deki_iterate(&p, &wrong, 0.5, None, &s, opts(1, 1)).is_err());
    }
}
