//! Randomized trials of the adversarial construction and solver fooling.

use anyhow::Result;
use deki::ensemble::gaussian_init;
use deki::forward::{ForwardModel, RegularizedProblem, Regularizer};
use deki::linalg::spectral_norm;
use deki::lowerbound::{adversarial_pair, fool_solver, Branch, FoolReport, GAP_FLOOR};
use deki::rng::{Purpose, RngStream};
use deki::schemes::{deki_iterate, RunOptions, StepSchedule};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTrial {
    pub index: usize,
    pub d_u: usize,
    pub d_y: usize,
    pub queries: usize,
    pub branch: Branch,
    pub rank: usize,
    pub y_norm: f64,
    pub gap: f64,
    /// `max(‖(G_0 − G')U‖, ‖(G_B − G')U‖) / max(‖U‖, 1)`.
    pub agreement: f64,
    pub g0_norm: f64,
    pub gb_norm: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub trials: usize,
    pub failures: usize,
    pub tail_branch: usize,
    pub head_branch: usize,
    pub max_agreement: f64,
    pub max_gb_norm: f64,
    /// Smallest `gap/‖y‖`.
    pub min_relative_gap: f64,
}

fn random(rows: usize, cols: usize, s: &mut RngStream) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| s.normal())
}

/// Trial `index` draws `d_u` from `d_us` cyclically, `d_y ∈ 1..=6`, a
/// Gaussian query table with `⌊d_u/2⌋` columns, a Gaussian `y` and a seed
/// map rescaled to a random norm in `[0, 1]`.
pub fn pair_trial(seed: u64, index: usize, d_us: &[usize]) -> Result<PairTrial> {
    let mut s = RngStream::new(seed, Purpose::Trial, index as u64);
    let du = d_us[index % d_us.len()];
    let dy = 1 + index / d_us.len() % 6;
    let n = du / 2;
    let u = random(du, n, &mut s);
    let mut g = random(dy, du, &mut s);
    let target = s.uniform();
    let norm = spectral_norm(&g);
    if norm > 0.0 {
        g *= target / norm;
    }
    let g = g * (1.0 - 1e-15);
    let y = DVector::from_fn(dy, |_, _| s.normal());
    let pair = adversarial_pair(&u, &y, &g)?;
    let un = u.norm().max(1.0);
    let gu = &g * &u;
    let agreement = ((&pair.g0 * &u - &gu).norm()).max((&pair.gb * &u - &gu).norm()) / un;
    let g0_norm = spectral_norm(&pair.g0);
    let gb_norm = spectral_norm(&pair.gb);
    let y_norm = y.norm();
    let passed = agreement <= 1e-10 && gb_norm <= 2.0 + 1e-10 && g0_norm <= 2.0 + 1e-10 && pair.gap >= (GAP_FLOOR - 1e-9) * y_norm;
    Ok(PairTrial {
        index,
        d_u: du,
        d_y: dy,
        queries: n,
        branch: pair.branch,
        rank: pair.rank,
        y_norm,
        gap: pair.gap,
        agreement,
        g0_norm,
        gb_norm,
        passed,
    })
}

pub fn pair_trials(seed: u64, n_trials: usize, d_us: &[usize]) -> Result<(Vec<PairTrial>, PairSummary)> {
    let trials = (0..n_trials).into_par_iter().map(|i| pair_trial(seed, i, d_us)).collect::<Result<Vec<_>>>()?;
    let summary = PairSummary {
        trials: trials.len(),
        failures: trials.iter().filter(|t| !t.passed).count(),
        tail_branch: trials.iter().filter(|t| t.branch == Branch::Tail).count(),
        head_branch: trials.iter().filter(|t| t.branch == Branch::Head).count(),
        max_agreement: trials.iter().map(|t| t.agreement).fold(0.0, f64::max),
        max_gb_norm: trials.iter().map(|t| t.gb_norm).fold(0.0, f64::max),
        min_relative_gap: trials.iter().map(|t| t.gap / t.y_norm).fold(f64::INFINITY, f64::min),
    };
    Ok((trials, summary))
}

/// DEKI with the largest ensemble and step count that fit `⌊d_u/2⌋`
/// queries (`J = 2`, `2J + 1 = 5` queries per step).
pub fn budgeted_deki_solver(seed: u64) -> impl Fn(&DVector<f64>, &ForwardModel) -> deki::Result<DVector<f64>> + Copy {
    move |y: &DVector<f64>, m: &ForwardModel| {
        let du = m.input_dim();
        let p = RegularizedProblem::new(m.clone(), Regularizer::scaled_identity(du, 1.0)?, y.clone())?;
        let init = gaussian_init(du, 2, 1.0, seed)?;
        let sched = StepSchedule::with_ratio(2.5, 0.1, 1e-12)?;
        let opts = RunOptions {
            n_steps: du / 2 / 5,
            seed,
            snapshots: false,
        };
        Ok(deki_iterate(&p, &init, 0.5, None, &sched, opts)?.final_mean())
    }
}

/// Plays the adversary against the zero solver and budgeted DEKI on the
/// zero seed map.
pub fn fool_defaults(d_u: usize, d_y: usize, seed: u64) -> Result<Vec<(String, FoolReport)>> {
    let mut s = RngStream::new(seed, Purpose::Trial, u64::MAX);
    let y = DVector::from_fn(d_y, |_, _| s.normal());
    let g = DMatrix::zeros(d_y, d_u);
    let zero = fool_solver(|_: &DVector<f64>, m: &ForwardModel| Ok(DVector::zeros(m.input_dim())), &g, &y)?;
    let deki = fool_solver(budgeted_deki_solver(seed), &g, &y)?;
    Ok(vec![("zero".into(), zero), ("deki".into(), deki)])
}
