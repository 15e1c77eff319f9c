//! Experiment configuration.
//!
//! Configs are flat TOML documents. Every key is optional except
//! `schema_version`, `problem` and `scheme`; unset problem parameters take
//! the per-problem defaults below. Unknown keys are rejected.

use anyhow::{bail, ensure, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Transport,
    Darcy,
    SyntheticLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Eki,
    NaiveDeki,
    Deki,
    Leki,
}

/// Darcy kernel setups: `(σ, l_x, l_y)`, all with zero mean and `ε = 1e-3`.
pub const DARCY_SETUPS: [(f64, f64, f64); 4] = [(0.1, 0.1, 0.1), (0.1, 0.2, 0.05), (0.1, 0.15, 0.05), (0.1, 0.1, 0.05)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub problem: ProblemKind,
    pub scheme: SchemeKind,

    /// Parameter dimension (transport, synthetic-linear).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_u: Option<usize>,
    /// Observation count (transport, synthetic-linear).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_y: Option<usize>,
    /// Transport speed `a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
    /// Transport observation time `T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    /// Observation noise standard deviation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// Regularization strength `γ`; also the initial ensemble spread.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Darcy kernel setup, 1 to 4.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setup: Option<usize>,
    /// Darcy grid size `N` (the grid is `N × N`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    /// Darcy observation blocks per side.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_blocks: Option<usize>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_rate: Option<f64>,
    /// Reference mean step `h̃`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub htilde: Option<f64>,
    /// `h_n / h̃_n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps0: Option<f64>,
    /// Truncation bound of the linearization; default is data-driven.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_loc: Option<f64>,
    /// Artificial noise level of LEKI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leki_sigma: Option<f64>,
    /// Whether LEKI localizes with the true transport speed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leki_known_speed: Option<bool>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_rep: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_seed: Option<u64>,
    /// Redraw the problem (speed, truth, data) for every repeat instead of
    /// keeping the data fixed across repeats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub randomize: Option<bool>,
}

impl ExperimentConfig {
    pub fn new(problem: ProblemKind, scheme: SchemeKind) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            problem,
            scheme,
            d_u: None,
            d_y: None,
            speed: None,
            time: None,
            noise: None,
            gamma: None,
            setup: None,
            grid: None,
            obs_blocks: None,
            ensemble_size: None,
            keep_rate: None,
            htilde: None,
            step_ratio: None,
            eps0: None,
            m_g: None,
            r_loc: None,
            leki_sigma: None,
            leki_known_speed: None,
            n_steps: None,
            n_rep: None,
            base_seed: None,
            randomize: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn d_u(&self) -> usize {
        self.d_u.unwrap_or(match self.problem {
            ProblemKind::SyntheticLinear => 50,
            _ => 120,
        })
    }

    pub fn d_y(&self) -> usize {
        self.d_y.unwrap_or(match self.problem {
            ProblemKind::SyntheticLinear => 30,
            ProblemKind::Darcy => self.obs_blocks() * self.obs_blocks(),
            ProblemKind::Transport => self.d_u(),
        })
    }

    pub fn speed(&self) -> f64 {
        self.speed.unwrap_or(0.25)
    }

    pub fn time(&self) -> f64 {
        self.time.unwrap_or(1.0)
    }

    pub fn noise(&self) -> f64 {
        self.noise.unwrap_or(match self.problem {
            ProblemKind::Darcy => 1e-3,
            _ => 1e-2,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(0.1)
    }

    pub fn setup(&self) -> usize {
        self.setup.unwrap_or(1)
    }

    pub fn grid(&self) -> usize {
        self.grid.unwrap_or(32)
    }

    pub fn obs_blocks(&self) -> usize {
        self.obs_blocks.unwrap_or(8)
    }

    pub fn ensemble_size(&self) -> usize {
        self.ensemble_size.unwrap_or(match self.problem {
            ProblemKind::Darcy => 15,
            _ => 20,
        })
    }

    pub fn keep_rate(&self) -> f64 {
        self.keep_rate.unwrap_or(0.5)
    }

    pub fn htilde(&self) -> f64 {
        self.htilde.unwrap_or(match self.problem {
            ProblemKind::Darcy => 0.5,
            _ => 2.5,
        })
    }

    pub fn step_ratio(&self) -> f64 {
        self.step_ratio.unwrap_or(0.1)
    }

    pub fn eps0(&self) -> f64 {
        self.eps0.unwrap_or(1e-12)
    }

    pub fn r_loc(&self) -> f64 {
        self.r_loc.unwrap_or(1.5)
    }

    pub fn leki_sigma(&self) -> f64 {
        self.leki_sigma.unwrap_or(1e-3)
    }

    pub fn leki_known_speed(&self) -> bool {
        self.leki_known_speed.unwrap_or(true)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps.unwrap_or(100)
    }

    pub fn n_rep(&self) -> usize {
        self.n_rep.unwrap_or(1)
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed.unwrap_or(0)
    }

    pub fn randomize(&self) -> bool {
        self.randomize.unwrap_or(false)
    }

    /// Fails fast on parameters outside the modules' preconditions.
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            self.schema_version
        );
        let pos = |name: &str, x: f64| -> Result<()> {
            ensure!(x > 0.0 && x.is_finite(), "{name} must be positive and finite, got {x}");
            Ok(())
        };
        ensure!(self.d_u() >= 1 && self.d_y() >= 1, "dimensions must be positive");
        ensure!(self.ensemble_size() >= 2, "ensemble_size must be at least 2");
        let lam = self.keep_rate();
        ensure!(lam > 0.0 && lam < 1.0, "keep_rate must lie in (0, 1), got {lam}");
        pos("htilde", self.htilde())?;
        pos("step_ratio", self.step_ratio())?;
        pos("eps0", self.eps0())?;
        pos("gamma", self.gamma())?;
        pos("r_loc", self.r_loc())?;
        ensure!(self.noise() >= 0.0 && self.noise().is_finite(), "noise must be nonnegative");
        ensure!(self.leki_sigma() >= 0.0, "leki_sigma must be nonnegative");
        ensure!(self.time() >= 0.0 && self.time().is_finite(), "time must be nonnegative");
        ensure!(self.speed().is_finite(), "speed must be finite");
        ensure!(self.n_rep() >= 1, "n_rep must be at least 1");
        if let Some(m) = self.m_g {
            pos("m_g", m)?;
        }
        match self.problem {
            ProblemKind::Darcy => {
                ensure!((1..=4).contains(&self.setup()), "setup must be 1 to 4, got {}", self.setup());
                ensure!(self.grid() >= 4, "grid must be at least 4");
                ensure!(self.obs_blocks() >= 1, "obs_blocks must be positive");
                ensure!(self.d_u.is_none(), "d_u is set by the KL truncation for darcy");
                ensure!(self.d_y.is_none(), "d_y is obs_blocks² for darcy");
                if self.scheme == SchemeKind::Leki {
                    bail!("leki needs a spatial index map and is only available for transport and synthetic-linear");
                }
            }
            ProblemKind::Transport | ProblemKind::SyntheticLinear => {
                ensure!(
                    self.setup.is_none() && self.grid.is_none() && self.obs_blocks.is_none(),
                    "setup, grid and obs_blocks only apply to darcy"
                );
            }
        }
        Ok(())
    }
}
