//! Problem instances built from a config.

use std::sync::Arc;

use anyhow::{Context, Result};
use deki::ensemble::{gaussian_init, Ensemble};
use deki::forward::darcy::block_centres;
use deki::forward::{darcy_model, generate_transport_data, kl_basis, transport_model, ForwardMap, ForwardModel, KLField, KernelParams, LinearMap, RegularizedProblem, Regularizer};
use deki::rng::{Purpose, RngStream};
use deki::schemes::{gaspari_cohn_localization, Scheme, StepSchedule};
use nalgebra::{DMatrix, DVector};

use crate::config::{ExperimentConfig, ProblemKind, SchemeKind, DARCY_SETUPS};

/// A regularized problem together with its reference solution and, for
/// Darcy, the KL field used for solution errors.
#[derive(Debug, Clone)]
pub struct Instance {
    pub problem: RegularizedProblem,
    /// Ground truth in parameter space (transport, synthetic-linear).
    pub truth: Option<DVector<f64>>,
    /// Ground-truth log-permeability on the grid (Darcy).
    pub truth_field: Option<DVector<f64>>,
    pub kl: Option<Arc<KLField>>,
    /// Transport speed actually used.
    pub speed: Option<f64>,
    pub u_min: DVector<f64>,
    pub l_min: f64,
    pub ynorm2: f64,
}

/// KL basis of a Darcy setup at the configured resolution.
pub fn darcy_kl(cfg: &ExperimentConfig) -> Result<KLField> {
    let (sigma, lx, ly) = DARCY_SETUPS[cfg.setup() - 1];
    Ok(kl_basis(KernelParams { sigma, lx, ly }, 0.0, cfg.grid(), 1e-3)?)
}

/// Builds the instance for `problem_seed`. The speed, truth and noise are
/// drawn from streams keyed by that seed.
pub fn build_instance(cfg: &ExperimentConfig, problem_seed: u64) -> Result<Instance> {
    cfg.validate()?;
    let mut truth = None;
    let mut truth_field = None;
    let mut kl = None;
    let mut speed = None;
    let problem = match cfg.problem {
        ProblemKind::Transport => {
            let du = cfg.d_u();
            let a = if cfg.randomize() {
                RngStream::new(problem_seed, Purpose::Problem, 0).uniform()
            } else {
                cfg.speed()
            };
            speed = Some(a);
            let map = transport_model(du, cfg.d_y(), a, cfg.time())?;
            let u = draw_truth(du, problem_seed);
            let y = generate_transport_data(&map, &u, cfg.noise(), problem_seed)?;
            truth = Some(u);
            let reg = Regularizer::scaled_identity(du, cfg.gamma() / (du as f64).sqrt())?;
            RegularizedProblem::new(ForwardModel::new(map), reg, y)?
        }
        ProblemKind::SyntheticLinear => {
            let (du, dy) = (cfg.d_u(), cfg.d_y());
            let mut s = RngStream::new(problem_seed, Purpose::Problem, 0);
            let scale = 1.0 / (du as f64).sqrt();
            let g = DMatrix::from_fn(dy, du, |_, _| scale * s.normal());
            let map = LinearMap::new(g);
            let u = draw_truth(du, problem_seed);
            let y = generate_transport_data(&map, &u, cfg.noise(), problem_seed)?;
            truth = Some(u);
            RegularizedProblem::new(ForwardModel::new(map), Regularizer::scaled_identity(du, cfg.gamma())?, y)?
        }
        ProblemKind::Darcy => {
            let field = Arc::new(darcy_kl(cfg)?);
            let b = cfg.obs_blocks();
            let map = darcy_model(field.clone(), block_centres(b))?;
            let a_true = field.sample_full(problem_seed);
            let mut y = map.observe_field(&a_true)?;
            let mut s = RngStream::new(problem_seed, Purpose::DataNoise, 0);
            for v in y.iter_mut() {
                *v += cfg.noise() * s.normal();
            }
            truth_field = Some(a_true);
            let du = map.input_dim();
            kl = Some(field);
            RegularizedProblem::new(ForwardModel::new(map), Regularizer::scaled_identity(du, cfg.gamma())?, y)?
        }
    };
    let (u_min, l_min) = problem.optimal_solution().context("computing the reference minimizer")?;
    let ynorm2 = problem.data().norm_squared();
    Ok(Instance {
        problem,
        truth,
        truth_field,
        kl,
        speed,
        u_min,
        l_min,
        ynorm2,
    })
}

fn draw_truth(du: usize, seed: u64) -> DVector<f64> {
    let mut s = RngStream::new(seed, Purpose::Truth, 0);
    DVector::from_fn(du, |_, _| s.normal())
}

/// `N(0, γ² I)` initial ensemble keyed by the run seed.
pub fn initial_ensemble(cfg: &ExperimentConfig, inst: &Instance, seed: u64) -> Result<Ensemble> {
    Ok(gaussian_init(inst.problem.d_u(), cfg.ensemble_size(), cfg.gamma(), seed)?)
}

pub fn schedule(cfg: &ExperimentConfig) -> Result<StepSchedule> {
    Ok(StepSchedule::with_ratio(cfg.htilde(), cfg.step_ratio(), cfg.eps0())?)
}

pub fn scheme(cfg: &ExperimentConfig, inst: &Instance) -> Result<Scheme> {
    Ok(match cfg.scheme {
        SchemeKind::Eki => Scheme::Eki,
        SchemeKind::NaiveDeki => Scheme::NaiveDeki { keep_rate: cfg.keep_rate() },
        SchemeKind::Deki => Scheme::Deki {
            keep_rate: cfg.keep_rate(),
            m_g: cfg.m_g,
        },
        SchemeKind::Leki => {
            let shift = match (cfg.problem, cfg.leki_known_speed()) {
                (ProblemKind::Transport, true) => inst.speed.map(|a| a * cfg.time()),
                _ => None,
            };
            let localization = gaspari_cohn_localization(inst.problem.d_u(), inst.problem.d_y(), shift, cfg.r_loc())?;
            Scheme::Leki {
                localization,
                sigma: cfg.leki_sigma(),
            }
        }
    })
}
