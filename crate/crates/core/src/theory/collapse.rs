//! Ensemble-collapse audit: rank, conditioning, envelope, diagonal floor and
//! the one-step PSD bracket.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{covariance_sandwich, psd_order};
use crate::error::{Error, Result};
use crate::linalg::{rank_factor, singular_values, spectral_norm, sym_min_eigenvalue, symmetrize, RankFactor, RANK_RTOL};
use crate::schemes::RunRecord;

const TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollapseCheck {
    /// Rank or column space of `C_n` changed.
    Rank,
    /// `κ_n > κ̄`.
    Kappa,
    /// `‖C_n‖` above the exponential envelope.
    Envelope,
    /// `min_s C_n(s,s) < κ̄^{-1} ‖C_n‖ min_s P(s,s)`.
    Diagonal,
    /// `C_n` outside `[C_{n−1}(I+M²hC_{n−1})^{-2}, C_{n−1}(I+γ²hC_{n−1})^{-2}]`.
    Sandwich,
    /// Some eigenvalue of `C_n` exceeds its predecessor.
    Monotone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseStep {
    pub step: usize,
    pub cov_norm: f64,
    pub rank: usize,
    pub kappa: f64,
    pub diag_min: f64,
    pub diag_max: f64,
    /// `‖P_n − P_0‖₂` for the projectors onto `Im C_n` and `Im C_0`.
    pub projector_drift: f64,
    pub envelope: f64,
    pub diag_bound: f64,
    /// `(γ², M²)` of the step that produced this state.
    pub curvature: (f64, f64),
    /// Smallest eigenvalue of `C_n − lower` and `upper − C_n`, relative to
    /// `‖C_{n−1}‖`; negative values are PSD-order violations.
    pub sandwich_margins: Option<(f64, f64)>,
    pub violations: Vec<CollapseCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub gamma2: f64,
    pub m2: f64,
    pub kappa0: f64,
    pub kappa_bar: f64,
    pub cov_norm0: f64,
    pub rank0: usize,
    pub min_projector_diag: f64,
    pub steps: Vec<CollapseStep>,
}

impl CollapseReport {
    pub fn passed(&self) -> bool {
        self.steps.iter().all(|s| s.violations.is_empty())
    }

    /// `(step, check)` for every flagged check.
    pub fn violations(&self) -> Vec<(usize, CollapseCheck)> {
        self.steps
            .iter()
            .flat_map(|s| s.violations.iter().map(move |&c| (s.step, c)))
            .collect()
    }
}

struct State {
    factor: RankFactor,
    cov: DMatrix<f64>,
    norm: f64,
    kappa: f64,
    diag: (f64, f64),
}

fn state(t: &DMatrix<f64>, v0: &DMatrix<f64>) -> State {
    let j1 = t.ncols() as f64 - 1.0;
    let factor = rank_factor(t, RANK_RTOL);
    let s = &factor.singular_values;
    let kappa = if s.is_empty() { 1.0 } else { (s[0] / s[s.len() - 1]).powi(2) };
    let norm = s.iter().next().map(|x| x * x / j1).unwrap_or(0.0);
    let diag = t
        .row_iter()
        .map(|r| r.norm_squared() / j1)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
    let p = v0.transpose() * t;
    State {
        factor,
        cov: &p * p.transpose() / j1,
        norm,
        kappa,
        diag,
    }
}

fn drift(v: &DMatrix<f64>, v0: &DMatrix<f64>) -> f64 {
    if v.ncols() != v0.ncols() {
        return 1.0;
    }
    if v.ncols() == 0 {
        return 0.0;
    }
    // sine of the largest principal angle, without the cancellation in 1 − cos²
    spectral_norm(&(v - v0 * (v0.transpose() * v)))
}

/// Audits every step of a DEKI run recorded with snapshots.
///
/// `gamma` and `m` override the curvature bounds; by default they are the
/// extreme values over the run of the per-step `γ_n²` and `M_n²` of the
/// implemented linearization. The envelope uses the effective
/// `θ_k = h_k ‖C_k‖`, which equals `θ` up to the `ε0` stabilizer. All
/// checks use relative tolerance `1e-8`.
pub fn audit_collapse(run: &RunRecord, gamma: Option<f64>, m: Option<f64>) -> Result<CollapseReport> {
    let snaps = run
        .snapshots
        .as_ref()
        .ok_or_else(|| Error::MissingData("collapse audit needs per-step snapshots".into()))?;
    let n = run.steps.len();
    if snaps.deviations.len() != n + 1 || snaps.h.len() != n || snaps.curvature.len() != n {
        return Err(Error::MissingData(format!(
            "collapse audit needs {} deviation tables and {n} curvature records, found {} and {}",
            n + 1,
            snaps.deviations.len(),
            snaps.curvature.len()
        )));
    }
    let t0 = &snaps.deviations[0];
    let f0 = rank_factor(t0, RANK_RTOL);
    let v0 = f0.basis.clone();
    let s0 = state(t0, &v0);
    let gamma2 = match gamma {
        Some(g) => g * g,
        None => snaps.curvature.iter().map(|c| c.0).fold(f64::INFINITY, f64::min),
    };
    let m2 = match m {
        Some(m) => m * m,
        None => snaps.curvature.iter().map(|c| c.1).fold(0.0, f64::max),
    };
    let kappa_bar = if n == 0 { s0.kappa } else { s0.kappa.max(1.5 * m2 / gamma2) };
    let (kappa0, cov_norm0) = (s0.kappa, s0.norm);
    let min_p = v0.row_iter().map(|r| r.norm_squared()).fold(f64::INFINITY, f64::min);
    let mut envelope = s0.norm;
    let mut prev = s0;
    let mut steps = Vec::with_capacity(n);
    for k in 1..=n {
        let cur = state(&snaps.deviations[k], &v0);
        let h = snaps.h[k - 1];
        let theta = h * prev.norm;
        envelope /= (1.0 + gamma2 * theta).powi(2);
        let (g2k, m2k) = snaps.curvature[k - 1];
        let mut violations = Vec::new();
        let pd = drift(&cur.factor.basis, &v0);
        if cur.factor.rank() != f0.rank() || pd > TOL {
            violations.push(CollapseCheck::Rank);
        }
        if cur.kappa > kappa_bar * (1.0 + TOL) {
            violations.push(CollapseCheck::Kappa);
        }
        if cur.norm > envelope * (1.0 + TOL) {
            violations.push(CollapseCheck::Envelope);
        }
        let diag_bound = cur.norm * min_p / kappa_bar;
        if cur.diag.0 < diag_bound * (1.0 - TOL) {
            violations.push(CollapseCheck::Diagonal);
        }
        let mut sandwich_margins = None;
        if prev.norm > 0.0 && h > 0.0 && g2k > 0.0 {
            let scale = prev.norm;
            let (lo, hi) = covariance_sandwich(&prev.cov, h, g2k.sqrt(), m2k.max(g2k).sqrt())?;
            let (lo, hi) = (lo / scale, hi / scale);
            let c = &cur.cov / scale;
            let ok = psd_order(&lo, &c, TOL)? && psd_order(&c, &hi, TOL)?;
            if !ok {
                violations.push(CollapseCheck::Sandwich);
            }
            sandwich_margins = Some((sym_min_eigenvalue(&symmetrize(&(&c - lo))), sym_min_eigenvalue(&symmetrize(&(hi - c)))));
        }
        let before = singular_values(&prev.cov);
        let after = singular_values(&cur.cov);
        let tol = TOL * prev.norm.max(f64::MIN_POSITIVE);
        if after.iter().zip(before.iter()).any(|(a, b)| *a > b + tol) {
            violations.push(CollapseCheck::Monotone);
        }
        steps.push(CollapseStep {
            step: k,
            cov_norm: cur.norm,
            rank: cur.factor.rank(),
            kappa: cur.kappa,
            diag_min: cur.diag.0,
            diag_max: cur.diag.1,
            projector_drift: pd,
            envelope,
            diag_bound,
            curvature: (g2k, m2k),
            sandwich_margins,
            violations,
        });
        prev = cur;
    }
    Ok(CollapseReport {
        gamma2,
        m2,
        kappa0,
        kappa_bar,
        cov_norm0,
        rank0: f0.rank(),
        min_projector_diag: min_p,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{gaussian_init, Ensemble};
    use crate::forward::{ForwardModel, LinearMap, RegularizedProblem, Regularizer};
    use crate::rng::{Purpose, RngStream};
    use crate::schemes::{deki_iterate, RunOptions, StepSchedule};
    use nalgebra::DVector;

    fn opts(n: usize, seed: u64) -> RunOptions {
        RunOptions {
            n_steps: n,
            seed,
            snapshots: true,
        }
    }

    fn scalar_run(n: usize) -> RunRecord {
        let p = RegularizedProblem::new(
            ForwardModel::new(LinearMap::new(DMatrix::from_element(1, 1, 1.0))),
            Regularizer::scaled_identity(1, 0.0).unwrap(),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let e = Ensemble::new(DMatrix::from_row_slice(1, 2, &[-1.0, 1.0])).unwrap();
        let s = StepSchedule::new(1.0, 0.5, 0.0).unwrap();
        deki_iterate(&p, &e, 0.5, None, &s, opts(n, 3)).unwrap()
    }

    #[test]
    fn scalar_run_meets_envelope_with_equality() {
        let r = audit_collapse(&scalar_run(6), None, None).unwrap();
        assert!(r.passed(), "{:?}", r.violations());
        assert!((r.gamma2 - 1.0).abs() < 1e-12 && (r.m2 - 1.0).abs() < 1e-12);
        for s in &r.steps {
            assert!((s.cov_norm / s.envelope - 1.0).abs() < 1e-12);
        }
        assert!((r.steps[0].cov_norm - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_run_has_no_flags() {
        let r = audit_collapse(&scalar_run(0), None, None).unwrap();
        assert!(r.steps.is_empty() && r.passed());
    }

    fn linear_run(seed: u64) -> RunRecord {
        let mut s = RngStream::new(seed, Purpose::Trial, 0);
        let g = DMatrix::from_fn(6, 12, |_, _| s.normal() / 12f64.sqrt());
        let y = DVector::from_fn(6, |_, _| s.normal());
        let p = RegularizedProblem::new(ForwardModel::new(LinearMap::new(g)), Regularizer::scaled_identity(12, 0.3).unwrap(), y).unwrap();
        let e = gaussian_init(12, 5, 1.0, seed).unwrap();
        let sched = StepSchedule::new(0.25, 2.5, 1e-12).unwrap();
        deki_iterate(&p, &e, 0.5, None, &sched, opts(25, seed)).unwrap()
    }

    #[test]
    fn random_linear_runs_respect_norm_bounds() {
        for seed in 0..5 {
            let r = audit_collapse(&linear_run(seed), None, None).unwrap();
            let other: Vec<_> = r.violations().into_iter().filter(|v| v.1 != CollapseCheck::Sandwich).collect();
            assert!(other.is_empty(), "seed {seed}: {other:?}");
            assert!(r.steps.iter().all(|s| s.rank == 4));
        }
    }

    #[test]
    fn sandwich_fails_without_commutation() {
        // HᵀH = diag(1, 4) and a covariance with a strong off-diagonal: the
        // exact update leaves the upper bracket in PSD order although its
        // eigenvalues stay below the bracket's.
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let h = 1.0;
        let i = DMatrix::<f64>::identity(2, 2);
        let k = (&i + &c * &a * h).try_inverse().unwrap();
        let next = &k * &c * k.transpose();
        let (lo, hi) = covariance_sandwich(&c, h, 1.0, 2.0).unwrap();
        let ordered = psd_order(&lo, &next, 1e-12).unwrap() && psd_order(&next, &hi, 1e-12).unwrap();
        assert!(!ordered);
        let (ev_next, ev_hi) = (singular_values(&next), singular_values(&hi));
        assert!(ev_next.iter().zip(ev_hi.iter()).all(|(a, b)| a <= b));
        let commuting = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        let k = (&i + &commuting * &a * h).try_inverse().unwrap();
        let next = &k * &commuting * k.transpose();
        let (lo, hi) = covariance_sandwich(&commuting, h, 1.0, 2.0).unwrap();
        assert!(psd_order(&lo, &next, 1e-12).unwrap() && psd_order(&next, &hi, 1e-12).unwrap());
    }

    #[test]
    fn injected_inflation_is_flagged() {
        let mut run = scalar_run(6);
        let snaps = run.snapshots.as_mut().unwrap();
        snaps.deviations[3] *= 1.1f64.sqrt();
        let r = audit_collapse(&run, None, None).unwrap();
        let flagged: Vec<_> = r.violations();
        assert!(flagged.contains(&(3, CollapseCheck::Envelope)));
        assert_eq!(flagged.iter().map(|f| f.0).min(), Some(3), "{flagged:?}");
    }

    #[test]
    fn missing_snapshots_rejected() {
        let mut run = scalar_run(2);
        run.snapshots = None;
        assert!(matches!(audit_collapse(&run, None, None), Err(Error::MissingData(_))));
    }

    #[test]
    fn report_serializes() {
        let r = audit_collapse(&scalar_run(2), None, None).unwrap();
        let back: CollapseReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
