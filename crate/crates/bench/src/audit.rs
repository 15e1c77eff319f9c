//! Offline theory audits of a recorded DEKI run.

use anyhow::{ensure, Result};
use deki::linalg::spectral_norm;
use deki::theory::{audit_collapse, audit_linearization_error, stability_report, CollapseCheck, CollapseReport, LinearizationMargin, StabilityReport};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SchemeKind};
use crate::experiment::{problem_seed, run_on};
use crate::problem::build_instance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config_hash: String,
    pub seed: u64,
    pub collapse: CollapseReport,
    /// Curvature bound used for the stability check.
    pub m: f64,
    pub stability: StabilityReport,
    /// Per-step Gauss–Newton distances; only for linear maps, where the
    /// Hessian bound is zero.
    pub linearization: Option<Vec<LinearizationMargin>>,
    /// Checks excluded from the verdict.
    pub ignored: Vec<CollapseCheck>,
    /// `(step, check)` pairs that count against the verdict.
    pub violations: Vec<(usize, CollapseCheck)>,
    pub passed: bool,
}

/// Parses a kebab-case check name such as `sandwich`.
pub fn parse_check(name: &str) -> Result<CollapseCheck> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|_| anyhow::anyhow!("unknown check {name:?}"))
}

/// Runs DEKI with snapshots and audits collapse, stability and, for linear
/// maps, the Gauss–Newton distance. `M` is the exact norm of the stacked
/// operator for linear maps and the largest recorded `M_n` otherwise.
pub fn audit(cfg: &ExperimentConfig, seed: u64, ignore: &[CollapseCheck]) -> Result<AuditReport> {
    ensure!(cfg.scheme == SchemeKind::Deki, "audits apply to the deki scheme");
    let inst = build_instance(cfg, problem_seed(cfg, seed))?;
    let (_, rec) = run_on(cfg, &inst, seed, true)?;
    let collapse = audit_collapse(&rec, None, None)?;
    let snaps = rec.snapshots.as_ref().expect("snapshots requested");
    let p = &inst.problem;
    let matrix = p.model().map().matrix();
    let m = match &matrix {
        Some(g) => {
            let mut stacked = nalgebra::DMatrix::zeros(p.d_z(), p.d_u());
            stacked.rows_mut(0, p.d_y()).copy_from(g);
            stacked.rows_mut(p.d_y(), p.d_u()).copy_from(&p.regularizer().to_dense());
            spectral_norm(&stacked)
        }
        None => collapse.m2.sqrt(),
    };
    let norms: Vec<f64> = snaps.residuals.iter().map(|r| r.norm()).collect();
    let stability = stability_report(&norms, m, cfg.htilde());
    let linearization = match matrix {
        Some(_) => Some(audit_linearization_error(&rec, p, 0.0)?),
        None => None,
    };
    let mut violations: Vec<(usize, CollapseCheck)> = collapse.violations().into_iter().filter(|(_, c)| !ignore.contains(c)).collect();
    violations.sort_by_key(|v| v.0);
    let passed = violations.is_empty() && stability.passed && linearization.as_ref().is_none_or(|l| l.iter().all(|m| m.passed));
    Ok(AuditReport {
        config_hash: cfg.hash(),
        seed,
        collapse,
        m,
        stability,
        linearization,
        ignored: ignore.to_vec(),
        violations,
        passed,
    })
}
