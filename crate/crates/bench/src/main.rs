use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use deki_bench::audit::{audit, parse_check};
use deki_bench::config::{ExperimentConfig, ProblemKind, SchemeKind};
use deki_bench::experiment::{repeat, run};
use deki_bench::lowerbound::{fool_defaults, pair_trials};
use deki_bench::output::{output_dir, write_aggregate, write_json, write_trial, OUTPUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "deki", version, about = "Dropout ensemble Kalman inversion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seeded experiment and write its CSV and JSON sidecar.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run seed; defaults to base_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run n_rep seeds in parallel and write per-run and aggregate files.
    Repeat {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run DEKI with full snapshots and audit the collapse, stability and
    /// linearization bounds. Exits with status 2 on any violation.
    Audit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Exclude a collapse check from the verdict (repeatable):
        /// rank, kappa, envelope, diagonal, sandwich, monotone.
        #[arg(long = "ignore")]
        ignore: Vec<String>,
    },
    /// Randomized trials of the adversarial linear pair, plus the zero
    /// solver and budgeted DEKI against it. Exits with status 2 on failure.
    Lowerbound {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_value = "4,20,50")]
        d_u: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = OUTPUT_DIR_ENV)]
        out: Option<PathBuf>,
    },
}

/// Config file plus per-field overrides.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config; fields given as flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    problem: Option<ProblemKind>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeKind>,
    #[arg(long)]
    d_u: Option<usize>,
    #[arg(long)]
    d_y: Option<usize>,
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    time: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    setup: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    obs_blocks: Option<usize>,
    #[arg(long, short = 'j')]
    ensemble_size: Option<usize>,
    #[arg(long)]
    keep_rate: Option<f64>,
    #[arg(long)]
    htilde: Option<f64>,
    #[arg(long)]
    step_ratio: Option<f64>,
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long)]
    m_g: Option<f64>,
    #[arg(long)]
    r_loc: Option<f64>,
    #[arg(long)]
    leki_sigma: Option<f64>,
    #[arg(long)]
    leki_known_speed: Option<bool>,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    n_rep: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    randomize: Option<bool>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::new(
                self.problem.unwrap_or(ProblemKind::Transport),
                self.scheme.unwrap_or(SchemeKind::Deki),
            ),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f { cfg.$f = Some(v); }
            )*};
        }
        if let Some(p) = self.problem {
            cfg.problem = p;
        }
        if let Some(s) = self.scheme {
            cfg.scheme = s;
        }
        set!(d_u, d_y, speed, time, noise, gamma, setup, grid, obs_blocks, ensemble_size, keep_rate, htilde, step_ratio, eps0, m_g, r_loc, leki_sigma, leki_known_speed, n_steps, n_rep, base_seed, randomize);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<bool> {
    match Cli::parse().command {
        Command::Run { cfg, seed } => {
            let config = cfg.resolve()?;
            let t = run(&config, seed.unwrap_or(config.base_seed()))?;
            let path = write_trial(&output_dir(cfg.out), &t)?;
            println!(
                "{}: final e_n = {:.3e}, rate = {}, queries = {}",
                path.display(),
                t.summary.final_misfit,
                t.summary.rate.map_or("n/a".into(), |r| format!("{r:.4}")),
                t.summary.total_queries
            );
            Ok(true)
        }
        Command::Repeat { cfg } => {
            let config = cfg.resolve()?;
            let dir = output_dir(cfg.out);
            let (agg, trials) = repeat(&config)?;
            for t in &trials {
                write_trial(&dir, t)?;
            }
            let path = write_aggregate(&dir, &agg)?;
            println!(
                "{}: {} runs, {} failed, median final e_n = {:.3e}, rate = {:.4} ± {:.4}",
                path.display(),
                trials.len(),
                agg.failed.len(),
                agg.final_misfit_median,
                agg.rate_mean,
                agg.rate_std
            );
            for (s, e) in &agg.failed {
                eprintln!("seed {s} failed: {e}");
            }
            Ok(agg.failed.is_empty())
        }
        Command::Audit { cfg, seed, ignore } => {
            let config = cfg.resolve()?;
            let ignore = ignore.iter().map(|s| parse_check(s)).collect::<Result<Vec<_>>>()?;
            let seed = seed.unwrap_or(config.base_seed());
            let report = audit(&config, seed, &ignore)?;
            let path = output_dir(cfg.out).join(format!("audit-{}-seed{seed}.json", &report.config_hash[..12]));
            write_json(&path, &report)?;
            println!(
                "{}: {} collapse violations counted, stability ratio {:.6} (bound {:.6}), {}",
                path.display(),
                report.violations.len(),
                report.stability.max_ratio,
                report.stability.bound,
                if report.passed { "PASS" } else { "FAIL" }
            );
            Ok(report.passed)
        }
        Command::Lowerbound { trials, d_u, seed, out } => {
            anyhow::ensure!(!d_u.is_empty() && d_u.iter().all(|&d| d >= 2), "d_u values must be at least 2");
            let (results, summary) = pair_trials(seed, trials, &d_u)?;
            let fooled = fool_defaults(*d_u.iter().max().expect("nonempty"), 3, seed)?;
            let dir = output_dir(out);
            let path = dir.join(format!("lowerbound-seed{seed}.json"));
            write_json(
                &path,
                &serde_json::json!({ "summary": summary, "trials": results, "solvers": fooled }),
            )?;
            println!(
                "{}: {} trials, {} failures, branches tail/head = {}/{}, min gap/‖y‖ = {:.4}",
                path.display(),
                summary.trials,
                summary.failures,
                summary.tail_branch,
                summary.head_branch,
                summary.min_relative_gap
            );
            for (name, r) in &fooled {
                println!("solver {name}: {} queries, worst error {:.4} (0.1‖y‖ = {:.4})", r.queries, r.worst_error, 0.1 * r.y_norm);
            }
            Ok(summary.failures == 0 && fooled.iter().all(|(_, r)| r.fooled()))
        }
    }
}
