use std::fs;
use std::path::{Path, PathBuf};

use epse_core::haar_analysis::{ConditioningReport, EpsilonDecayReport, MomentReport};
use epse_core::harness::{IterationAggregate, TrialRecord};
use epse_core::priors::DecisionCheck;
use epse_core::state_evolution::ScanRow;
use epse_core::{ExperimentConfig, SeTrace};
use serde::Serialize;

use crate::CliError;

/// Column order of `results.csv`.
pub const RESULT_COLUMNS: [&str; 9] = [
    "trial",
    "iter",
    "mse_b_emp",
    "mse_post_emp",
    "v_ab",
    "v_ba",
    "gamma_t",
    "h_dot_q",
    "b_dot_m",
];

fn out_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| out_err(dir, e))
}

/// Echo of the effective config, overrides applied.
pub fn write_config(dir: &Path, config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let path = dir.join("config.toml");
    let text = toml::to_string(config).map_err(|e| out_err(&path, e))?;
    fs::write(&path, text).map_err(|e| out_err(&path, e))?;
    Ok(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| out_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| out_err(path, e))?;
    Ok(path.to_path_buf())
}

fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<PathBuf, CliError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| out_err(path, e))?;
    w.write_record(header).map_err(|e| out_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| out_err(path, e))?;
    }
    w.flush().map_err(|e| out_err(path, e))?;
    Ok(path.to_path_buf())
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, num)
}

/// One row per trial and iteration. The two inner products are complex;
/// their moduli are written.
pub fn write_results(path: &Path, records: &[TrialRecord]) -> Result<PathBuf, CliError> {
    let rows = records.iter().flat_map(|r| {
        r.iterations.iter().map(move |it| {
            vec![
                r.trial.to_string(),
                it.t.to_string(),
                num(it.mse_b_emp),
                num(it.mse_post_emp),
                num(it.v_ab),
                num(it.v_ba),
                num(it.gamma),
                num(it.h_dot_q.norm()),
                num(it.b_dot_m.norm()),
            ]
        })
    });
    write_csv(path, &RESULT_COLUMNS, rows)
}

pub fn write_aggregate(path: &Path, rows: &[IterationAggregate]) -> Result<PathBuf, CliError> {
    let header = [
        "iter",
        "count",
        "mse_b_mean",
        "mse_b_std",
        "mse_post_mean",
        "mse_post_std",
        "se_mse_ba",
        "se_mse_ab",
        "se_mse_post",
    ];
    let rows = rows.iter().map(|r| {
        vec![
            r.t.to_string(),
            r.count.to_string(),
            num(r.mse_b_mean),
            num(r.mse_b_std),
            num(r.mse_post_mean),
            num(r.mse_post_std),
            num(r.se_mse_ba),
            opt(r.se_mse_ab),
            opt(r.se_mse_post),
        ]
    });
    write_csv(path, &header, rows)
}

pub fn write_se(path: &Path, trace: &SeTrace) -> Result<PathBuf, CliError> {
    let rows = trace.mse_ba.iter().enumerate().map(|(t, &ba)| {
        vec![
            t.to_string(),
            num(ba),
            opt(trace.mse_ab.get(t).copied()),
            opt(trace.mse_post.get(t).copied()),
        ]
    });
    write_csv(path, &["iter", "mse_ba", "mse_ab", "mse_post"], rows)
}

pub fn write_scan(path: &Path, rows: &[ScanRow]) -> Result<PathBuf, CliError> {
    let rows = rows.iter().map(|r| {
        vec![
            num(r.delta),
            r.fp_count.to_string(),
            r.fp_values.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";"),
            r.converged.to_string(),
        ]
    });
    write_csv(path, &["delta", "fp_count", "fp_values", "converged"], rows)
}

pub fn write_moments(path: &Path, reports: &[MomentReport]) -> Result<PathBuf, CliError> {
    let rows = reports.iter().enumerate().flat_map(|(i, r)| {
        let kind = if i % 2 == 0 { "haar" } else { "rotated" };
        r.stats.iter().map(move |s| {
            vec![
                r.n.to_string(),
                kind.to_string(),
                s.name.clone(),
                num(s.theory),
                num(s.estimate.mean),
                num(s.estimate.stderr),
                num(s.z),
                s.pass.to_string(),
            ]
        })
    });
    write_csv(path, &["n", "kind", "statistic", "theory", "mean", "stderr", "z", "pass"], rows)
}

pub fn write_identities(path: &Path, reports: &[ConditioningReport]) -> Result<PathBuf, CliError> {
    let rows = reports.iter().flat_map(|r| {
        r.identities.iter().map(move |i| {
            vec![
                r.t.to_string(),
                r.t_prime.to_string(),
                i.name.clone(),
                num(i.residual),
                i.pass.to_string(),
            ]
        })
    });
    write_csv(path, &["t", "t_prime", "identity", "residual", "pass"], rows)
}

pub fn write_decay(path: &Path, reports: &[EpsilonDecayReport]) -> Result<PathBuf, CliError> {
    let rows = reports.iter().flat_map(|r| {
        r.rows
            .iter()
            .map(move |row| vec![r.t.to_string(), row.n.to_string(), num(row.median_eps1), num(row.median_eps2)])
    });
    write_csv(path, &["t", "n", "median_eps1", "median_eps2"], rows)
}

pub fn write_denoiser(path: &Path, reports: &[DecisionCheck]) -> Result<PathBuf, CliError> {
    let rows = reports.iter().map(|r| {
        vec![
            num(r.v),
            num(r.mmse),
            num(r.eta_re.mean),
            num(r.eta_re.stderr),
            num(r.eta_im.mean),
            num(r.eta_im.stderr),
            num(r.eta_tilde_re.mean),
            num(r.eta_tilde_re.stderr),
            r.pass.to_string(),
        ]
    });
    let header = [
        "v",
        "mmse",
        "eta_re",
        "eta_re_se",
        "eta_im",
        "eta_im_se",
        "eta_tilde_re",
        "eta_tilde_re_se",
        "pass",
    ];
    write_csv(path, &header, rows)
}
