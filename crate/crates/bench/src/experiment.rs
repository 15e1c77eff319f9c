//! Single runs and seeded repeats.

use std::time::Instant;

use anyhow::{Context, Result};
use deki::schemes::{iterate, RunOptions, RunRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::metrics::{decay_rate, mean_std, median, relative_misfit, relative_solution_error};
use crate::problem::{build_instance, initial_ensemble, schedule, scheme, Instance};

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub step: usize,
    pub loss: f64,
    pub e_n: f64,
    pub cov_norm: f64,
    pub diag_min: f64,
    pub diag_max: f64,
    pub rank: usize,
    pub kappa: f64,
    pub h_n: f64,
    pub htilde_n: f64,
    pub queries: u64,
}

/// Everything about a run except the per-step rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub problem_seed: u64,
    pub scheme: String,
    pub n_steps: usize,
    pub speed: Option<f64>,
    pub m_g: Option<f64>,
    pub l_min: f64,
    pub ynorm2: f64,
    pub final_misfit: f64,
    /// `|r|` over the default fit window.
    pub rate: Option<f64>,
    /// Final relative `L²` error of the log-permeability (Darcy only).
    pub solution_error: Option<f64>,
    pub total_queries: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub summary: TrialSummary,
    pub rows: Vec<Row>,
}

impl Trial {
    pub fn misfits(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.e_n).collect()
    }
}

/// Seed of the problem instance used by the run with `seed`.
pub fn problem_seed(cfg: &ExperimentConfig, seed: u64) -> u64 {
    if cfg.randomize() {
        seed
    } else {
        cfg.base_seed()
    }
}

/// Runs `cfg` with `seed` on a prebuilt instance. The raw record (with
/// snapshots if requested) is returned alongside the trial.
pub fn run_on(cfg: &ExperimentConfig, inst: &Instance, seed: u64, snapshots: bool) -> Result<(Trial, RunRecord)> {
    let start = Instant::now();
    let init = initial_ensemble(cfg, inst, seed)?;
    let sched = schedule(cfg)?;
    let sch = scheme(cfg, inst)?;
    let opts = RunOptions {
        n_steps: cfg.n_steps(),
        seed,
        snapshots,
    };
    let rec = iterate(&inst.problem, &init, &sch, &sched, opts).with_context(|| format!("seed {seed}"))?;
    let rows = rec
        .all_metrics()
        .map(|m| {
            Ok(Row {
                step: m.step,
                loss: m.loss,
                e_n: relative_misfit(m.loss, inst.l_min, inst.ynorm2)?,
                cov_norm: m.cov_norm,
                diag_min: m.diag_min,
                diag_max: m.diag_max,
                rank: m.rank,
                kappa: m.kappa,
                h_n: m.h,
                htilde_n: m.htilde,
                queries: m.queries,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let e: Vec<f64> = rows.iter().map(|r| r.e_n).collect();
    let solution_error = match (&inst.kl, &inst.truth_field) {
        (Some(kl), Some(a_true)) => Some(relative_solution_error(kl, &kl.field(&rec.final_mean())?, a_true)?),
        _ => None,
    };
    let summary = TrialSummary {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        seed,
        problem_seed: problem_seed(cfg, seed),
        scheme: rec.scheme.clone(),
        n_steps: rec.steps.len(),
        speed: inst.speed,
        m_g: rec.m_g,
        l_min: inst.l_min,
        ynorm2: inst.ynorm2,
        final_misfit: *e.last().expect("initial row always present"),
        rate: decay_rate(&e),
        solution_error,
        total_queries: rec.final_metrics().queries,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((Trial { summary, rows }, rec))
}

/// Builds the instance for `seed` and runs it.
pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<Trial> {
    let inst = build_instance(cfg, problem_seed(cfg, seed))?;
    Ok(run_on(cfg, &inst, seed, false)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub step: usize,
    pub e_mean: f64,
    pub e_std: f64,
    pub cov_norm_mean: f64,
    pub diag_min_mean: f64,
    pub diag_max_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Seeds whose run failed, with the error.
    pub failed: Vec<(u64, String)>,
    pub final_misfit_median: f64,
    pub rate_mean: f64,
    pub rate_std: f64,
    /// Runs with a defined rate.
    pub rate_count: usize,
    pub solution_error_mean: Option<f64>,
    pub solution_error_median: Option<f64>,
    #[serde(skip)]
    pub steps: Vec<AggregateRow>,
}

/// Runs seeds `base_seed .. base_seed + n_rep` in parallel. Without
/// `randomize` every run shares the instance of `base_seed`.
pub fn repeat(cfg: &ExperimentConfig) -> Result<(Aggregate, Vec<Trial>)> {
    cfg.validate()?;
    let shared = if cfg.randomize() {
        None
    } else {
        Some(build_instance(cfg, cfg.base_seed())?)
    };
    let seeds: Vec<u64> = (0..cfg.n_rep() as u64).map(|k| cfg.base_seed() + k).collect();
    let results: Vec<(u64, Result<Trial>)> = seeds
        .par_iter()
        .map(|&s| {
            let r = match &shared {
                Some(inst) => run_on(cfg, inst, s, false).map(|(t, _)| t),
                None => run(cfg, s),
            };
            (s, r)
        })
        .collect();
    let mut trials = Vec::new();
    let mut failed = Vec::new();
    for (s, r) in results {
        match r {
            Ok(t) => trials.push(t),
            Err(e) => failed.push((s, format!("{e:#}"))),
        }
    }
    Ok((aggregate(cfg, &trials, failed), trials))
}

/// Per-step statistics over trials with equal step counts.
pub fn aggregate(cfg: &ExperimentConfig, trials: &[Trial], failed: Vec<(u64, String)>) -> Aggregate {
    let n_rows = trials.iter().map(|t| t.rows.len()).min().unwrap_or(0);
    let steps = (0..n_rows)
        .map(|k| {
            let col = |f: fn(&Row) -> f64| trials.iter().map(|t| f(&t.rows[k])).collect::<Vec<_>>();
            let (e_mean, e_std) = mean_std(&col(|r| r.e_n));
            AggregateRow {
                step: trials[0].rows[k].step,
                e_mean,
                e_std,
                cov_norm_mean: mean_std(&col(|r| r.cov_norm)).0,
                diag_min_mean: mean_std(&col(|r| r.diag_min)).0,
                diag_max_mean: mean_std(&col(|r| r.diag_max)).0,
            }
        })
        .collect();
    let rates: Vec<f64> = trials.iter().filter_map(|t| t.summary.rate).collect();
    let (rate_mean, rate_std) = mean_std(&rates);
    let errs: Vec<f64> = trials.iter().filter_map(|t| t.summary.solution_error).collect();
    let finals: Vec<f64> = trials.iter().map(|t| t.summary.final_misfit).collect();
    Aggregate {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        seeds: trials.iter().map(|t| t.summary.seed).collect(),
        failed,
        final_misfit_median: median(&finals),
        rate_mean,
        rate_std,
        rate_count: rates.len(),
        solution_error_mean: (!errs.is_empty()).then(|| mean_std(&errs).0),
        solution_error_median: (!errs.is_empty()).then(|| median(&errs)),
        steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ProblemKind, SchemeKind};

    fn small(scheme: SchemeKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(ProblemKind::Transport, scheme);
        cfg.d_u = Some(24);
        cfg.ensemble_size = Some(6);
        cfg.n_steps = Some(20);
        cfg
    }

    #[test]
    fn zero_steps_gives_initial_row_only() {
        let mut cfg = small(SchemeKind::Deki);
        cfg.n_steps = Some(0);
        let t = run(&cfg, 1).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.summary.total_queries, 0);
    }

    #[test]
    fn runs_are_deterministic_and_consistent() {
        for s in [SchemeKind::Eki, SchemeKind::NaiveDeki, SchemeKind::Deki, SchemeKind::Leki] {
            let cfg = small(s);
            let a = run(&cfg, 7).unwrap();
            let b = run(&cfg, 7).unwrap();
            assert_eq!(a.rows, b.rows);
            assert_eq!(a.rows.len(), 21);
            let per_step = match s {
                SchemeKind::Deki => 13,
                SchemeKind::NaiveDeki => 12,
                _ => 6,
            };
            assert_eq!(a.summary.total_queries, 20 * per_step);
            for r in &a.rows {
                // misfits recompute exactly from the stored losses
                assert_eq!(r.e_n, relative_misfit(r.loss, a.summary.l_min, a.summary.ynorm2).unwrap());
            }
        }
    }

    #[test]
    fn repeat_statistics() {
        let mut cfg = small(SchemeKind::Deki);
        cfg.n_rep = Some(1);
        let (agg, trials) = repeat(&cfg).unwrap();
        assert!(agg.steps.iter().all(|r| r.e_std == 0.0));
        assert_eq!(trials.len(), 1);
        cfg.n_rep = Some(4);
        let (agg, trials) = repeat(&cfg).unwrap();
        assert!(agg.failed.is_empty());
        assert_eq!(agg.seeds, vec![0, 1, 2, 3]);
        for (k, row) in agg.steps.iter().enumerate() {
            let mean = trials.iter().map(|t| t.rows[k].e_n).sum::<f64>() / 4.0;
            assert!((row.e_mean - mean).abs() <= 1e-12 * mean.max(1e-300));
        }
        // fixed data across repeats
        assert!(trials.iter().all(|t| t.summary.ynorm2 == trials[0].summary.ynorm2));
    }

    #[test]
    fn randomized_repeats_redraw_the_problem() {
        let mut cfg = small(SchemeKind::Deki);
        cfg.n_rep = Some(2);
        cfg.randomize = Some(true);
        let (_, trials) = repeat(&cfg).unwrap();
        assert_ne!(trials[0].summary.speed, trials[1].summary.speed);
    }
}
