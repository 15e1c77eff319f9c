//! Adversarial linear instances for zeroth-order solvers.
//!
//! Given the points `U` a solver queried on a seed map `G'`, two maps
//! `G_0, G_B` are built that agree with `G'` on every column of `U` but
//! whose Tikhonov solutions are at least `‖y‖/(3√2)` apart. A solver that
//! saw only `G'U` therefore misses one of them by more than `‖y‖/10`,
//! whenever it used at most `d_u/2` queries.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::forward::{ForwardMap, ForwardModel};
use crate::linalg::{canonical_sign, orthonormal_complement, rank_factor, spectral_norm, sym_eigen_desc, RANK_RTOL};

/// Lower end of the guaranteed solution gap per unit `‖y‖`.
pub const GAP_FLOOR: f64 = 0.235_702_260_395_515_8; // 1/(3√2)

/// `argmin_u ½‖Gu − y‖² + ½‖u‖² = (GᵀG + I)^{-1}Gᵀy`.
pub fn tikhonov_solution(g: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("tikhonov data", g.nrows(), y.len())?;
    let n = g.ncols();
    let a = g.transpose() * g + DMatrix::identity(n, n);
    let ch = a.cholesky().ok_or(Error::Singular {
        context: "Tikhonov normal equations",
    })?;
    Ok(ch.solve(&(g.transpose() * y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// `‖z_2‖² ≥ ½`: the new block maps one free direction onto `z_2`.
    Tail,
    /// `‖z_1‖² > ½`: the new block is the identity on the first `r'`
    /// eigendirections of `CCᵀ`.
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialPair {
    pub g0: DMatrix<f64>,
    pub gb: DMatrix<f64>,
    pub branch: Branch,
    /// Rank of the query table.
    pub rank: usize,
    /// `‖u*(G_0) − u*(G_B)‖` for the given (unnormalized) `y`.
    pub gap: f64,
}

/// Builds `G_0 = CΣ_1ᵀ` and `G_B = CΣ_1ᵀ + BΣ_2ᵀ` from the query table
/// `U` (`d_u × n`), data `y` and seed map `G'` (`d_y × d_u`).
pub fn adversarial_pair(u: &DMatrix<f64>, y: &DVector<f64>, g_seed: &DMatrix<f64>) -> Result<AdversarialPair> {
    let (du, n) = u.shape();
    check_dim("seed map columns", du, g_seed.ncols())?;
    check_dim("seed map rows", y.len(), g_seed.nrows())?;
    if 2 * n > du {
        return Err(Error::QueryBudgetExceeded { used: n, allowed: du / 2 });
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("U", "query points must be finite"));
    }
    if spectral_norm(g_seed) > 1.0 + 1e-12 {
        return Err(Error::invalid("G'", "seed map must have operator norm at most 1"));
    }
    let ynorm = y.norm();
    if !(ynorm > 0.0) {
        return Err(Error::invalid("y", "data must be nonzero"));
    }
    let dy = y.len();
    let yhat = y / ynorm;
    let sigma1 = rank_factor(u, RANK_RTOL).basis;
    let r = sigma1.ncols();
    let sigma2 = orthonormal_complement(&sigma1);
    let c = g_seed * &sigma1;
    let (_, mut q) = sym_eigen_desc(&(&c * c.transpose()));
    canonical_sign(&mut q);
    let rp = r.min(dy);
    let qy = q.transpose() * &yhat;
    let z2 = qy.rows(rp, dy - rp);
    let z2n2 = z2.norm_squared();
    let mut bt = DMatrix::zeros(dy, du - r);
    let branch = if z2n2 >= 0.5 {
        // E = z_2/‖z_2‖ e_1ᵀ
        let col = z2 / z2n2.sqrt();
        bt.view_mut((rp, 0), (dy - rp, 1)).copy_from(&col);
        Branch::Tail
    } else {
        for k in 0..rp {
            bt[(k, k)] = 1.0;
        }
        Branch::Head
    };
    let b = &q * bt;
    let g0 = &c * sigma1.transpose();
    let gb = &g0 + b * sigma2.transpose();
    let gap = (tikhonov_solution(&g0, y)? - tikhonov_solution(&gb, y)?).norm();
    Ok(AdversarialPair {
        g0,
        gb,
        branch,
        rank: r,
        gap,
    })
}

/// Linear oracle that hides its matrix, so solvers only see responses.
struct Oracle(DMatrix<f64>);

impl ForwardMap for Oracle {
    fn input_dim(&self) -> usize {
        self.0.ncols()
    }
    fn output_dim(&self) -> usize {
        self.0.nrows()
    }
    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("oracle input", self.0.ncols(), u.len())?;
        Ok(&self.0 * u)
    }
    fn parallel_safe(&self) -> bool {
        false
    }
}

/// Result of playing the adversary against one solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoolReport {
    pub d_u: usize,
    pub d_y: usize,
    pub queries: usize,
    pub budget: usize,
    /// The solver used more than `⌊d_u/2⌋` queries; no pair was built and
    /// `worst_error` is its error on the seed map.
    pub guarantee_void: bool,
    pub branch: Option<Branch>,
    pub gap: Option<f64>,
    pub errors: Vec<f64>,
    pub worst_error: f64,
    pub y_norm: f64,
}

impl FoolReport {
    /// `worst_error > 0.1 ‖y‖`.
    pub fn fooled(&self) -> bool {
        self.worst_error > 0.1 * self.y_norm
    }
}

fn play<F>(solver: &mut F, g: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: FnMut(&DVector<f64>, &ForwardModel) -> Result<DVector<f64>>,
{
    let (model, log) = ForwardModel::logged(Arc::new(Oracle(g.clone())));
    let answer = solver(y, &model)?;
    check_dim("solver answer", g.ncols(), answer.len())?;
    let pts = log.lock().expect("query log poisoned").clone();
    let mut u = DMatrix::zeros(g.ncols(), pts.len());
    for (k, p) in pts.iter().enumerate() {
        u.set_column(k, p);
    }
    Ok((answer, u))
}

/// Runs `solver(y, oracle)` on the seed map, builds the adversarial pair
/// from the queries it made and replays it on both maps. The replays must
/// issue the same queries and return the same answer; the worst error
/// against the respective Tikhonov solutions is reported.
pub fn fool_solver<F>(mut solver: F, g_seed: &DMatrix<f64>, y: &DVector<f64>) -> Result<FoolReport>
where
    F: FnMut(&DVector<f64>, &ForwardModel) -> Result<DVector<f64>>,
{
    let (du, dy) = (g_seed.ncols(), g_seed.nrows());
    check_dim("fool_solver data", dy, y.len())?;
    let budget = du / 2;
    let (answer, u) = play(&mut solver, g_seed, y)?;
    let n = u.ncols();
    if n > budget {
        let err = (&answer - tikhonov_solution(g_seed, y)?).norm();
        return Ok(FoolReport {
            d_u: du,
            d_y: dy,
            queries: n,
            budget,
            guarantee_void: true,
            branch: None,
            gap: None,
            errors: vec![err],
            worst_error: err,
            y_norm: y.norm(),
        });
    }
    let pair = adversarial_pair(&u, y, g_seed)?;
    let mut errors = Vec::with_capacity(2);
    for g in [&pair.g0, &pair.gb] {
        let (a, uu) = play(&mut solver, g, y)?;
        let scale = 1.0 + answer.norm();
        let same_queries = uu.shape() == u.shape() && (&uu - &u).amax() <= 1e-8 * (1.0 + u.amax());
        if !same_queries || (&a - &answer).norm() > 1e-8 * scale {
            return Err(Error::invalid(
                "solver",
                "replay on an agreeing map changed the queries or the answer; the solver is not a deterministic zeroth-order rule",
            ));
        }
        errors.push((&a - tikhonov_solution(g, y)?).norm());
    }
    Ok(FoolReport {
        d_u: du,
        d_y: dy,
        queries: n,
        budget,
        guarantee_void: false,
        branch: Some(pair.branch),
        gap: Some(pair.gap),
        worst_error: errors.iter().cloned().fold(0.0, f64::max),
        errors,
        y_norm: y.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, RngStream};
    use proptest::prelude::*;

    fn random(rows: usize, cols: usize, s: &mut RngStream) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| s.normal())
    }

    #[test]
    fn tikhonov_examples() {
        let g = DMatrix::from_element(1, 1, 1.0);
        assert!((tikhonov_solution(&g, &DVector::from_element(1, 1.0)).unwrap()[0] - 0.5).abs() < 1e-15);
        assert_eq!(tikhonov_solution(&DMatrix::zeros(2, 3), &DVector::from_element(2, 1.0)).unwrap(), DVector::zeros(3));
        assert_eq!(tikhonov_solution(&g, &DVector::zeros(1)).unwrap(), DVector::zeros(1));
    }

    #[test]
    fn hand_example() {
        let u = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let p = adversarial_pair(&u, &DVector::from_element(1, 1.0), &DMatrix::zeros(1, 2)).unwrap();
        assert_eq!(p.branch, Branch::Head);
        assert_eq!(p.g0, DMatrix::zeros(1, 2));
        assert!((&p.gb - DMatrix::from_row_slice(1, 2, &[0.0, 1.0])).amax() < 1e-15);
        assert!((p.gap - 0.5).abs() < 1e-15);
        assert!((&p.gb * &u).amax() < 1e-15);
        let scaled = adversarial_pair(&u, &DVector::from_element(1, 3.0), &DMatrix::zeros(1, 2)).unwrap();
        assert!((scaled.gap - 1.5).abs() < 1e-14);
    }

    #[test]
    fn rejects_invalid_inputs() {
        let u = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(
            adversarial_pair(&u, &DVector::from_element(1, 1.0), &DMatrix::zeros(1, 2)),
            Err(Error::QueryBudgetExceeded { .. })
        ));
        let u = DMatrix::from_element(4, 1, 1.0);
        assert!(adversarial_pair(&u, &DVector::from_element(1, 1.0), &DMatrix::from_element(1, 4, 1.0)).is_err());
        assert!(adversarial_pair(&u, &DVector::zeros(1), &DMatrix::zeros(1, 4)).is_err());
    }

    fn check_pair(u: &DMatrix<f64>, y: &DVector<f64>, g: &DMatrix<f64>) -> Branch {
        let p = adversarial_pair(u, y, g).unwrap();
        let un = u.norm().max(1.0);
        assert!((&p.g0 * u - g * u).norm() <= 1e-10 * un);
        assert!((&p.gb * u - g * u).norm() <= 1e-10 * un);
        assert!(spectral_norm(&p.g0) <= 2.0 + 1e-10);
        assert!(spectral_norm(&p.gb) <= 2.0 + 1e-10);
        assert!(p.gap >= (GAP_FLOOR - 1e-9) * y.norm(), "gap {}", p.gap);
        p.branch
    }

    #[test]
    fn both_branches_reached() {
        let mut s = RngStream::new(11, Purpose::Trial, 0);
        let mut seen = (0, 0);
        for trial in 0..200 {
            let du = [4, 20, 50][trial % 3];
            let dy = 1 + trial % 7;
            let n = du / 2;
            let u = random(du, n, &mut s);
            let mut g = random(dy, du, &mut s);
            g /= spectral_norm(&g) * (0.2 + 0.8 * s.uniform());
            if spectral_norm(&g) > 1.0 {
                g /= spectral_norm(&g);
            }
            let y = random(dy, 1, &mut s).column(0).into_owned();
            match check_pair(&u, &y, &g) {
                Branch::Tail => seen.0 += 1,
                Branch::Head => seen.1 += 1,
            }
        }
        assert!(seen.0 >= 20 && seen.1 >= 20, "{seen:?}");
    }

    proptest! {
        #[test]
        fn pair_properties(du in 2usize..24, dy in 1usize..6, frac in 0.0f64..1.0, seed in 0u64..10_000, gscale in 0.0f64..1.0) {
            let mut s = RngStream::new(seed, Purpose::Trial, 1);
            let n = ((du / 2) as f64 * frac).round() as usize;
            let u = random(du, n, &mut s);
            let mut g = random(dy, du, &mut s);
            g *= gscale / spectral_norm(&g).max(1e-300);
            let y = random(dy, 1, &mut s).column(0).into_owned() * (0.1 + s.uniform() * 10.0);
            check_pair(&u, &y, &g);
        }
    }

    #[test]
    fn trivial_solver_is_fooled() {
        let mut s = RngStream::new(5, Purpose::Trial, 0);
        let g = random(3, 8, &mut s) * 0.1;
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let r = fool_solver(|_y: &DVector<f64>, _m: &ForwardModel| Ok(DVector::zeros(8)), &g, &y).unwrap();
        assert_eq!(r.queries, 0);
        assert!(!r.guarantee_void);
        assert!(r.worst_error >= GAP_FLOOR * y.norm() / 2.0);
        assert!(r.fooled());
    }

    #[test]
    fn well_resourced_solver_voids_guarantee() {
        let mut s = RngStream::new(6, Purpose::Trial, 0);
        let g = random(3, 6, &mut s) * 0.1;
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        // probe every coordinate, then solve exactly
        let solver = |y: &DVector<f64>, m: &ForwardModel| {
            let mut cols = DMatrix::zeros(3, 6);
            for i in 0..6 {
                let e = DVector::from_fn(6, |k, _| if k == i { 1.0 } else { 0.0 });
                cols.set_column(i, &m.evaluate(&e)?);
            }
            tikhonov_solution(&cols, y)
        };
        let r = fool_solver(solver, &g, &y).unwrap();
        assert!(r.guarantee_void && r.queries == 6);
        assert!(r.worst_error < 1e-12 && !r.fooled());
    }

    #[test]
    fn budgeted_deki_is_fooled() {
        use crate::ensemble::gaussian_init;
        use crate::forward::{RegularizedProblem, Regularizer};
        use crate::schemes::{deki_iterate, RunOptions, StepSchedule};
        // J = 2 costs 5 queries per step, so two steps use the whole budget of 10
        let du = 20;
        let solver = |y: &DVector<f64>, m: &ForwardModel| {
            let p = RegularizedProblem::new(m.clone(), Regularizer::scaled_identity(du, 1.0)?, y.clone())?;
            let init = gaussian_init(du, 2, 1.0, 9)?;
            let sched = StepSchedule::new(0.1, 1.0, 1e-12)?;
            let opts = RunOptions {
                n_steps: 2,
                seed: 9,
                snapshots: false,
            };
            Ok(deki_iterate(&p, &init, 0.5, None, &sched, opts)?.final_mean())
        };
        for (k, g) in [DMatrix::zeros(3, du), random(3, du, &mut RngStream::new(8, Purpose::Trial, 0)) * 0.05].iter().enumerate() {
            let y = DVector::from_vec(vec![1.0, 0.5, -1.0 - k as f64]);
            let r = fool_solver(solver, g, &y).unwrap();
            assert_eq!(r.queries, 10);
            assert!(!r.guarantee_void && r.fooled(), "{r:?}");
        }
    }

    #[test]
    fn replay_mismatch_is_reported() {
        let g = DMatrix::zeros(1, 4);
        let y = DVector::from_element(1, 1.0);
        let mut calls = 0;
        let solver = |_y: &DVector<f64>, _m: &ForwardModel| {
            calls += 1;
            Ok(DVector::from_element(4, calls as f64))
        };
        assert!(fool_solver(solver, &g, &y).is_err());
    }

    #[test]
    fn report_round_trips() {
        let g = DMatrix::zeros(2, 4);
        let y = DVector::from_element(2, 1.0);
        let r = fool_solver(|_y: &DVector<f64>, _m: &ForwardModel| Ok(DVector::zeros(4)), &g, &y).unwrap();
        let back: FoolReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
