//! Library side of the `epse` binary: config parsing, the subcommands and
//! their file output.

pub mod config;
mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use epse_core::ensembles::SpectralDensity;
use epse_core::engine::{self, EngineOptions, ProblemInstance};
use epse_core::haar_analysis::{self, ConditioningSnapshot};
use epse_core::harness::{self, CheckResult};
use epse_core::priors;
use epse_core::random::stream_rng;
use epse_core::state_evolution::{self, SeError};
use epse_core::ExperimentConfig;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub use config::{load_config, parse_config, ConfigError};
pub use output::RESULT_COLUMNS;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
    #[error(transparent)]
    Haar(#[from] haar_analysis::HaarError),
    #[error(transparent)]
    StateEvolution(#[from] SeError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Prior(#[from] priors::PriorError),
    #[error(transparent)]
    Ensemble(#[from] epse_core::ensembles::EnsembleError),
    #[error("writing {path}: {message}")]
    Output { path: String, message: String },
    #[error("{0} needs a [scan] section")]
    MissingScan(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Run,
    Se,
    ThresholdScan,
    VerifyHaar,
    VerifyConditioning,
    VerifyDenoiser,
}

/// What a subcommand produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub checks: Vec<CheckResult>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn check(name: &str, pass: bool, worst: f64, tolerance: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        pass,
        worst,
        tolerance,
        detail,
    }
}

/// Runs a subcommand and writes its files into `out` (the config's
/// `output_dir` when `None`).
pub fn execute(
    cmd: Subcommand,
    config: &ExperimentConfig,
    workers: Option<usize>,
    out: Option<&Path>,
) -> Result<Outcome, CliError> {
    let dir = out.map_or_else(|| PathBuf::from(&config.output_dir), Path::to_path_buf);
    output::create_dir(&dir)?;
    let start = Instant::now();
    let mut files = vec![output::write_config(&dir, config)?];
    let (checks, summary) = match cmd {
        Subcommand::Run => run(config, workers, &dir, &mut files)?,
        Subcommand::Se => se(config, &dir, &mut files)?,
        Subcommand::ThresholdScan => threshold_scan(config, &dir, &mut files)?,
        Subcommand::VerifyHaar => verify_haar(config, &dir, &mut files)?,
        Subcommand::VerifyConditioning => verify_conditioning(config, &dir, &mut files)?,
        Subcommand::VerifyDenoiser => verify_denoiser(config, &dir, &mut files)?,
    };
    let summary = json!({
        "config": config,
        "report": summary,
        "checks": checks,
        "passed": checks.iter().all(|c| c.pass),
        "wall_time_s": start.elapsed().as_secs_f64(),
    });
    files.push(output::write_json(&dir.join("summary.json"), &summary)?);
    Ok(Outcome { checks, files })
}

type Step = (Vec<CheckResult>, serde_json::Value);

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn run(config: &ExperimentConfig, workers: Option<usize>, dir: &Path, files: &mut Vec<PathBuf>) -> Result<Step, CliError> {
    let result = harness::run_experiment(config, workers)?;
    files.push(output::write_results(&dir.join("results.csv"), &result.records)?);
    files.push(output::write_aggregate(&dir.join("aggregate.csv"), &result.report.iterations)?);
    Ok((result.report.checks.clone(), to_value(&result.report)))
}

fn se(config: &ExperimentConfig, dir: &Path, files: &mut Vec<PathBuf>) -> Result<Step, CliError> {
    let trace = config.state_evolution()?;
    files.push(output::write_se(&dir.join("se.csv"), &trace)?);
    Ok((Vec::new(), json!({ "se": trace })))
}

fn density_family(config: &ExperimentConfig) -> impl Fn(f64) -> Result<SpectralDensity, SeError> + Sync + '_ {
    move |delta: f64| {
        let m = ((delta * config.n as f64).round() as usize).max(1);
        Ok(config.ensemble.target_density(m, config.n)?)
    }
}

fn threshold_scan(config: &ExperimentConfig, dir: &Path, files: &mut Vec<PathBuf>) -> Result<Step, CliError> {
    let scan = config.scan.as_ref().ok_or(CliError::MissingScan("threshold-scan"))?;
    let deltas: Vec<f64> = if scan.points == 1 {
        vec![scan.delta_min]
    } else {
        (0..scan.points)
            .map(|i| scan.delta_min + (scan.delta_max - scan.delta_min) * i as f64 / (scan.points - 1) as f64)
            .collect()
    };
    let grid = state_evolution::default_init_grid(scan.init_points);
    let family = density_family(config);
    let rows = state_evolution::threshold_scan(&family, config.sigma2, &config.prior, &deltas, &grid)?;
    files.push(output::write_scan(&dir.join("threshold.csv"), &rows)?);
    // Bisect every neighbouring pair of rates whose fixed-point counts differ.
    let mut thresholds = Vec::new();
    if let Some(tol) = scan.bisect_tol {
        for w in rows.windows(2) {
            if w[0].fp_count != w[1].fp_count {
                let found = state_evolution::find_threshold(
                    &family,
                    config.sigma2,
                    &config.prior,
                    (w[0].delta, w[1].delta),
                    &grid,
                    tol,
                )?;
                thresholds.extend(found);
            }
        }
    }
    let unconverged = rows.iter().filter(|r| !r.converged).count();
    let checks = vec![check(
        "scan-converged",
        unconverged == 0,
        unconverged as f64,
        0.0,
        format!("{unconverged} of {} rates left some start unconverged", rows.len()),
    )];
    Ok((checks, json!({ "rows": rows, "thresholds": thresholds })))
}

fn verify_haar(config: &ExperimentConfig, dir: &Path, files: &mut Vec<PathBuf>) -> Result<Step, CliError> {
    let v = &config.verify;
    let mut checks = Vec::new();
    let mut moments = Vec::new();
    for (i, &n) in v.moment_sizes.iter().enumerate() {
        let mut rng = stream_rng(config.seed, 2 * i as u64);
        let m = haar_analysis::moment_check(n, v.moment_samples, v.sigmas, &mut rng)?;
        let mut rng = stream_rng(config.seed, 2 * i as u64 + 1);
        let b = haar_analysis::biunitary_check(n, v.moment_samples, v.sigmas, &mut rng)?;
        for (label, r) in [("moments", &m), ("biunitary", &b)] {
            let worst = r.stats.iter().map(|s| s.z).fold(0.0, f64::max);
            checks.push(check(&format!("{label}-n{n}"), r.pass, worst, v.sigmas, "largest z-score".into()));
        }
        moments.push(m);
        moments.push(b);
    }
    files.push(output::write_moments(&dir.join("haar_moments.csv"), &moments)?);

    let mut rng = stream_rng(config.seed, 1000);
    let clt = haar_analysis::trace_clt_check(v.clt_n, v.clt_k, v.clt_repeats, v.sigmas, &mut rng)?;
    checks.push(check(
        "trace-clt",
        clt.pass,
        clt.ks_distance,
        v.sigmas,
        format!("n = {}, k = {}, worst value is the KS distance of Re a_0", clt.n, clt.k),
    ));
    let mut rng = stream_rng(config.seed, 1001);
    let law = haar_analysis::strong_law_check(&v.strong_law_sizes, v.strong_law_seeds, v.sigmas, &mut rng)?;
    checks.push(check(
        "strong-law",
        law.pass,
        law.linear_slope,
        -0.5,
        format!("quadratic-form slope {:.3}", law.quadratic_slope),
    ));
    Ok((checks, json!({ "moments": moments, "trace_clt": clt, "strong_law": law })))
}

fn verify_conditioning(config: &ExperimentConfig, dir: &Path, files: &mut Vec<PathBuf>) -> Result<Step, CliError> {
    let v = &config.verify;
    let t_top = v.conditioning_t;
    let mut rng = stream_rng(config.seed, 0);
    let model = epse_core::ensembles::build_measurement(&config.ensemble, config.m(), config.n, &mut rng)?;
    let inst = ProblemInstance::generate(model, &config.prior, config.sigma2, &mut rng)?;
    let opts = EngineOptions {
        keep_history: true,
        ..Default::default()
    };
    let rec = engine::run_ep(&inst, &config.prior, t_top + 1, &opts)?;
    let history = rec.history.as_ref().expect("history requested");
    let vmat = inst.model.factors.right().to_dense();

    let mut identity_reports = Vec::new();
    let mut residual_reports = Vec::new();
    let mut rng = stream_rng(config.seed, 1);
    for t in 0..=t_top {
        for tp in [t, t + 1] {
            if tp == 0 {
                continue;
            }
            let snap = ConditioningSnapshot::from_history(history, vmat.clone(), t, tp)?;
            let f = haar_analysis::conditional_mean_build(&snap)?;
            identity_reports.push(haar_analysis::conditioning_identity_check(&snap, &f)?);
            residual_reports.push(haar_analysis::residual_haar_check(&snap, &f, v.resamples, &mut rng)?);
        }
    }
    files.push(output::write_identities(&dir.join("conditioning.csv"), &identity_reports)?);

    let mut checks = Vec::new();
    let worst = identity_reports
        .iter()
        .flat_map(|r| r.identities.iter().map(|i| i.residual))
        .fold(0.0, f64::max);
    checks.push(check(
        "conditioning-identities",
        identity_reports.iter().all(|r| r.pass),
        worst,
        haar_analysis::IDENTITY_TOL,
        format!("{} snapshots up to t = {t_top}", identity_reports.len()),
    ));
    let worst = residual_reports
        .iter()
        .map(|r| r.max_unitarity_error.max(r.max_constraint_error).max(r.reconstruction_error))
        .fold(0.0, f64::max);
    checks.push(check(
        "residual-haar",
        residual_reports.iter().all(|r| r.pass),
        worst,
        1e-8,
        format!("{} resamples per snapshot", v.resamples),
    ));

    let mut rng = stream_rng(config.seed, 2);
    let cont = haar_analysis::continuation_check(
        &inst,
        &config.prior,
        t_top,
        v.continuation_resamples,
        v.sigmas,
        &mut rng,
    )?;
    checks.push(check(
        "continuation",
        cont.pass,
        (cont.original - cont.resampled.mean).abs() / cont.resampled_sd,
        v.sigmas,
        format!("prefix error {:.2e}", cont.prefix_error),
    ));

    let mut decay = Vec::new();
    if !v.eps_sizes.is_empty() && v.eps_seeds > 0 {
        for t in 1..=t_top.max(1) {
            let r = haar_analysis::epsilon_decay(
                &config.ensemble,
                &config.prior,
                config.delta,
                config.sigma2,
                &v.eps_sizes,
                v.eps_seeds,
                t,
                config.seed,
            )?;
            checks.push(check(
                &format!("eps-decay-t{t}"),
                r.pass,
                r.rows.last().map_or(f64::NAN, |row| row.median_eps1.max(row.median_eps2)),
                0.0,
                "medians shrink along the size grid".into(),
            ));
            decay.push(r);
        }
        files.push(output::write_decay(&dir.join("eps_decay.csv"), &decay)?);
    }
    Ok((
        checks,
        json!({
            "identities": identity_reports,
            "residual": residual_reports,
            "continuation": cont,
            "eps_decay": decay,
        }),
    ))
}

fn verify_denoiser(config: &ExperimentConfig, dir: &Path, files: &mut Vec<PathBuf>) -> Result<Step, CliError> {
    let v = &config.verify;
    let mut reports = Vec::new();
    for (i, &var) in v.denoiser_variances.iter().enumerate() {
        let mut rng = stream_rng(config.seed, i as u64);
        reports.push(priors::decision_function_check(
            &config.prior,
            var,
            v.denoiser_samples,
            v.sigmas,
            &mut rng,
        )?);
    }
    files.push(output::write_denoiser(&dir.join("denoiser.csv"), &reports)?);
    let checks = reports
        .iter()
        .map(|r| {
            let z = r.eta_re.z_score(0.0).max(r.eta_im.z_score(0.0));
            check(
                &format!("decision-function-v{}", r.v),
                r.pass,
                z,
                v.sigmas,
                format!("E[z* eta~] = {:.6e} against mmse {:.6e}", r.eta_tilde_re.mean, r.mmse),
            )
        })
        .collect();
    Ok((checks, json!({ "prior": config.prior, "decision": reports })))
}
