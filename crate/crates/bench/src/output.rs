//! CSV and JSON writers. Files are written to a temporary name and renamed,
//! so readers never see partial output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::experiment::{Aggregate, Trial};

pub const OUTPUT_DIR_ENV: &str = "DEKI_OUTPUT_DIR";

/// Explicit flag, then the environment variable, then `./deki-out`.
pub fn output_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("deki-out"))
}

/// 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub const TRIAL_COLUMNS: [&str; 11] = [
    "step", "loss", "e_n", "cov_norm", "diag_min", "diag_max", "rank", "kappa", "h_n", "htilde_n", "queries",
];

pub fn trial_csv(trial: &Trial) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRIAL_COLUMNS)?;
    for r in &trial.rows {
        w.write_record([
            r.step.to_string(),
            fmt_f64(r.loss),
            fmt_f64(r.e_n),
            fmt_f64(r.cov_norm),
            fmt_f64(r.diag_min),
            fmt_f64(r.diag_max),
            r.rank.to_string(),
            fmt_f64(r.kappa),
            fmt_f64(r.h_n),
            fmt_f64(r.htilde_n),
            r.queries.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

pub fn aggregate_csv(agg: &Aggregate) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "e_mean", "e_std", "cov_norm_mean", "diag_min_mean", "diag_max_mean"])?;
    for r in &agg.steps {
        w.write_record([
            r.step.to_string(),
            fmt_f64(r.e_mean),
            fmt_f64(r.e_std),
            fmt_f64(r.cov_norm_mean),
            fmt_f64(r.diag_min_mean),
            fmt_f64(r.diag_max_mean),
        ])?;
    }
    Ok(w.into_inner()?)
}

fn stem(hash: &str, scheme: &str, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("{scheme}-{}-seed{s}", &hash[..12]),
        None => format!("{scheme}-{}-aggregate", &hash[..12]),
    }
}

/// Writes `<stem>.csv` and its `<stem>.json` sidecar; returns the CSV path.
pub fn write_trial(dir: &Path, trial: &Trial) -> Result<PathBuf> {
    let s = &trial.summary;
    let base = dir.join(stem(&s.config_hash, &s.scheme, Some(s.seed)));
    let csv_path = base.with_extension("csv");
    write_atomic(&csv_path, &trial_csv(trial)?)?;
    write_json(&base.with_extension("json"), s)?;
    Ok(csv_path)
}

pub fn write_aggregate(dir: &Path, agg: &Aggregate) -> Result<PathBuf> {
    let scheme = serde_json::to_value(agg.config.scheme)?;
    let base = dir.join(stem(&agg.config_hash, scheme.as_str().unwrap_or("run"), None));
    let csv_path = base.with_extension("csv");
    write_atomic(&csv_path, &aggregate_csv(agg)?)?;
    write_json(&base.with_extension("json"), agg)?;
    Ok(csv_path)
}
