//! Seeded Monte Carlo runs of EP over many trials, aggregated against the
//! state-evolution prediction.

use std::collections::BTreeSet;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, EngineError, EngineOptions, History, IterationRecord, ProblemInstance, StopReason};
use crate::ensembles::{build_measurement, EnsembleError, EnsembleSpec};
use crate::haar_analysis::{self, GaussianityReport, HaarError};
use crate::priors::{Prior, PriorError};
use crate::random::stream_rng;
use crate::state_evolution::{self, SeError, SeTrace};
use crate::stats;

/// SE values at or below this are treated as numerically zero.
pub const MSE_FLOOR: f64 = 1e-13;
/// Relative tolerance of the SE-agreement check.
pub const SE_AGREEMENT_TOL: f64 = 0.15;
/// Bound on the normalized correlation of `h_t` and `q_s`.
pub const ORTHOGONALITY_TOL: f64 = 0.1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("all {0} trials failed; first error: {1}")]
    AllTrialsFailed(usize, String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    StateEvolution(#[from] SeError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Haar(#[from] HaarError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    /// Trial-mean empirical MSEs track SE.
    SeAgreement,
    /// `h_t` is asymptotically orthogonal to every `q_s`.
    Orthogonality,
    /// Fixed coordinates of `h_t` minus its projection are Gaussian.
    Gaussianity,
}

impl Check {
    pub fn name(self) -> &'static str {
        match self {
            Check::SeAgreement => "se-agreement",
            Check::Orthogonality => "orthogonality",
            Check::Gaussianity => "gaussianity",
        }
    }
}

/// Sweep used by `threshold-scan`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub delta_min: f64,
    pub delta_max: f64,
    pub points: usize,
    #[serde(default = "default_init_points")]
    pub init_points: usize,
    /// Bisection tolerance on the threshold; no bisection when absent.
    #[serde(default)]
    pub bisect_tol: Option<f64>,
}

fn default_init_points() -> usize {
    25
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            delta_min: 0.1,
            delta_max: 1.0,
            points: 19,
            init_points: default_init_points(),
            bisect_tol: None,
        }
    }
}

/// Parameters of the Haar verification subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub moment_sizes: Vec<usize>,
    pub moment_samples: usize,
    pub clt_n: usize,
    pub clt_k: usize,
    pub clt_repeats: usize,
    pub strong_law_sizes: Vec<usize>,
    pub strong_law_seeds: usize,
    pub sigmas: f64,
    /// Largest `t` for the conditioning identities.
    pub conditioning_t: usize,
    pub resamples: usize,
    pub continuation_resamples: usize,
    pub eps_sizes: Vec<usize>,
    pub eps_seeds: usize,
    pub denoiser_variances: Vec<f64>,
    pub denoiser_samples: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            moment_sizes: vec![4, 8],
            moment_samples: 100_000,
            clt_n: 256,
            clt_k: 3,
            clt_repeats: 2000,
            strong_law_sizes: vec![64, 128, 256, 512],
            strong_law_seeds: 200,
            sigmas: 5.0,
            conditioning_t: 3,
            resamples: 100,
            continuation_resamples: 50,
            eps_sizes: vec![64, 128, 256, 512],
            eps_seeds: 40,
            denoiser_variances: vec![0.05, 0.5],
            denoiser_samples: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub delta: f64,
    pub ensemble: EnsembleSpec,
    pub prior: Prior,
    pub sigma2: f64,
    pub t_max: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub keep_history: bool,
    #[serde(default)]
    pub checks: BTreeSet<Check>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default)]
    pub scan: Option<ScanConfig>,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_trials() -> usize {
    1
}

fn default_output_dir() -> String {
    "out".into()
}

impl ExperimentConfig {
    /// Number of measurements, `round(delta n)`.
    pub fn m(&self) -> usize {
        (self.delta * self.n as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |s: String| Err(HarnessError::Config(s));
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta = {} not in (0, 1]", self.delta));
        }
        if self.m() < 1 {
            return bad(format!("round(delta n) = 0 for delta = {}, n = {}", self.delta, self.n));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 = {} must be positive", self.sigma2));
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.checks.contains(&Check::Gaussianity) && !self.keep_history {
            return bad("the gaussianity check needs keep_history = true".into());
        }
        if self.checks.contains(&Check::Gaussianity) && self.n < 4 {
            return bad("the gaussianity check needs n >= 4".into());
        }
        self.ensemble.validate()?;
        self.prior.validate()?;
        if self.prior.is_gaussian() {
            return bad("EP needs a non-Gaussian prior".into());
        }
        if let Some(s) = &self.scan {
            if !(s.delta_min > 0.0 && s.delta_min <= s.delta_max && s.delta_max <= 1.0) || s.points == 0 {
                return bad("scan needs 0 < delta_min <= delta_max <= 1 and points >= 1".into());
            }
        }
        Ok(())
    }

    /// SE trajectory from the ensemble's limiting eigenvalue law.
    pub fn state_evolution(&self) -> Result<SeTrace, HarnessError> {
        let density = self.ensemble.target_density(self.m(), self.n)?;
        Ok(state_evolution::se_run(&density, self.delta, self.sigma2, &self.prior, self.t_max)?)
    }
}

/// One finished trial.
#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub trial: usize,
    pub iterations: Vec<IterationRecord>,
    pub final_mse_b: Option<f64>,
    pub cross: Vec<Vec<Complex64>>,
    pub stop: StopReason,
    pub history: Option<History>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub error: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationAggregate {
    pub t: usize,
    /// Trials that reached this iteration.
    pub count: usize,
    pub mse_b_mean: f64,
    pub mse_b_std: f64,
    pub mse_post_mean: f64,
    pub mse_post_std: f64,
    pub se_mse_ba: f64,
    pub se_mse_ab: Option<f64>,
    pub se_mse_post: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    /// Largest normalized deviation found.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AggregateReport {
    pub trials: usize,
    pub succeeded: usize,
    pub failures: Vec<TrialFailure>,
    pub iterations: Vec<IterationAggregate>,
    pub se: SeTrace,
    pub checks: Vec<CheckResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaussianity: Option<Vec<GaussianityReport>>,
}

impl AggregateReport {
    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    /// Successful trials sorted by index.
    pub records: Vec<TrialRecord>,
    pub report: AggregateReport,
}

fn run_trial(config: &ExperimentConfig, trial: usize) -> Result<TrialRecord, HarnessError> {
    let mut rng = stream_rng(config.seed, trial as u64);
    let model = build_measurement(&config.ensemble, config.m(), config.n, &mut rng)?;
    let inst = ProblemInstance::generate(model, &config.prior, config.sigma2, &mut rng)?;
    let opts = EngineOptions {
        keep_history: config.keep_history,
        ..Default::default()
    };
    let rec = engine::run_ep(&inst, &config.prior, config.t_max, &opts)?;
    Ok(TrialRecord {
        trial,
        iterations: rec.iterations,
        final_mse_b: rec.final_mse_b,
        cross: rec.cross,
        stop: rec.stop,
        history: rec.history,
    })
}

/// Runs every trial on up to `workers` threads (all cores when `None`).
pub fn run_experiment(config: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    let se = config.state_evolution()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = workers {
        builder = builder.num_threads(k.max(1));
    }
    let pool = builder.build().map_err(|e| HarnessError::ThreadPool(e.to_string()))?;
    let results: Vec<(usize, Result<TrialRecord, HarnessError>)> =
        pool.install(|| (0..config.trials).into_par_iter().map(|i| (i, run_trial(config, i))).collect());

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (trial, r) in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(TrialFailure {
                trial,
                error: e.to_string(),
            }),
        }
    }
    if records.is_empty() {
        let first = failures.first().map(|f| f.error.clone()).unwrap_or_default();
        return Err(HarnessError::AllTrialsFailed(config.trials, first));
    }
    records.sort_by_key(|r| r.trial);
    failures.sort_by_key(|f| f.trial);

    let iterations = aggregate(&records, &se);
    let mut checks = Vec::new();
    let mut gaussianity = None;
    for check in &config.checks {
        match check {
            Check::SeAgreement => checks.push(se_agreement(&iterations)),
            Check::Orthogonality => checks.push(orthogonality(&records, &se)),
            Check::Gaussianity => {
                let (c, reports) = gaussianity_check(&records)?;
                checks.push(c);
                gaussianity = Some(reports);
            }
        }
    }
    Ok(ExperimentOutput {
        report: AggregateReport {
            trials: config.trials,
            succeeded: records.len(),
            failures,
            iterations,
            se,
            checks,
            gaussianity,
        },
        records,
    })
}

/// Empirical `N^{-1} ||q_t||^2` of a trial, including the final one.
fn mse_b_at(rec: &TrialRecord, t: usize) -> Option<f64> {
    match rec.iterations.get(t) {
        Some(r) => Some(r.mse_b_emp),
        None if t == rec.iterations.len() => rec.final_mse_b,
        None => None,
    }
}

/// Per-iteration mean and sample standard deviation across trials.
pub fn aggregate(records: &[TrialRecord], se: &SeTrace) -> Vec<IterationAggregate> {
    let mut out = Vec::with_capacity(se.mse_ba.len());
    for (t, &se_mse_ba) in se.mse_ba.iter().enumerate() {
        let b: Vec<f64> = records.iter().filter_map(|r| mse_b_at(r, t)).collect();
        if b.is_empty() {
            break;
        }
        let post: Vec<f64> = records
            .iter()
            .filter_map(|r| r.iterations.get(t).map(|i| i.mse_post_emp))
            .collect();
        let sd = |xs: &[f64]| if xs.len() > 1 { stats::sample_variance(xs).sqrt() } else { 0.0 };
        let mean = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { stats::mean(xs) };
        out.push(IterationAggregate {
            t,
            count: b.len(),
            mse_b_mean: stats::mean(&b),
            mse_b_std: sd(&b),
            mse_post_mean: mean(&post),
            mse_post_std: sd(&post),
            se_mse_ba,
            se_mse_ab: se.mse_ab.get(t).copied(),
            se_mse_post: se.mse_post.get(t).copied(),
        });
    }
    out
}

fn se_agreement(rows: &[IterationAggregate]) -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut at = String::new();
    let mut note = |rel: f64, label: String| {
        if rel > worst || rel.is_nan() {
            worst = if rel.is_nan() { f64::INFINITY } else { rel };
            at = label;
        }
    };
    for r in rows {
        if r.se_mse_ba > 10.0 * MSE_FLOOR {
            note((r.mse_b_mean - r.se_mse_ba).abs() / r.se_mse_ba, format!("mse_b at t = {}", r.t));
        }
        if let Some(p) = r.se_mse_post.filter(|&p| p > 10.0 * MSE_FLOOR) {
            note((r.mse_post_mean - p).abs() / p, format!("mse_post at t = {}", r.t));
        }
    }
    CheckResult {
        name: Check::SeAgreement.name().into(),
        pass: worst <= SE_AGREEMENT_TOL,
        worst,
        tolerance: SE_AGREEMENT_TOL,
        detail: format!("largest relative deviation at {at}"),
    }
}

/// Uses the trial mean of `N^{-1} h_t^H q_s`, the same estimator as the
/// SE-agreement check. The largest single-trial value is reported alongside.
fn orthogonality(records: &[TrialRecord], se: &SeTrace) -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut worst_single: f64 = 0.0;
    let mut at = String::new();
    let rows = records.iter().map(|r| r.cross.len()).min().unwrap_or(0);
    for t in 0..rows {
        let Some(&ab) = se.mse_ab.get(t) else { continue };
        let cols = records.iter().map(|r| r.cross[t].len()).min().unwrap_or(0);
        for s in 0..cols {
            let Some(&ba) = se.mse_ba.get(s) else { continue };
            let scale = (ab * ba).sqrt();
            let mean: Complex64 = records.iter().map(|r| r.cross[t][s]).sum::<Complex64>() / records.len() as f64;
            let coef = mean.norm() / scale;
            for r in records {
                worst_single = worst_single.max(r.cross[t][s].norm() / scale);
            }
            if coef > worst || coef.is_nan() {
                worst = if coef.is_nan() { f64::INFINITY } else { coef };
                at = format!("t = {t}, s = {s}");
            }
        }
    }
    CheckResult {
        name: Check::Orthogonality.name().into(),
        pass: worst <= ORTHOGONALITY_TOL,
        worst,
        tolerance: ORTHOGONALITY_TOL,
        detail: format!("largest trial-mean correlation at {at}; largest single-trial value {worst_single:.3}"),
    }
}

/// Coordinates pooled by the Gaussianity check.
pub const GAUSSIANITY_COORDINATES: [usize; 4] = [0, 1, 2, 3];

fn gaussianity_check(records: &[TrialRecord]) -> Result<(CheckResult, Vec<GaussianityReport>), HarnessError> {
    let histories: Vec<&History> = records.iter().filter_map(|r| r.history.as_ref()).collect();
    let t_last = histories.iter().map(|h| h.m.len()).min().unwrap_or(0);
    let mut reports = Vec::with_capacity(t_last);
    for t in 0..t_last {
        reports.push(haar_analysis::coordinate_gaussianity(&histories, t, &GAUSSIANITY_COORDINATES)?);
    }
    let worst = reports.iter().map(|r| r.anderson_darling).fold(0.0, f64::max);
    let worst_ratio = reports
        .iter()
        .map(|r| (r.variance_ratio - 1.0).abs())
        .fold(0.0, f64::max);
    Ok((
        CheckResult {
            name: Check::Gaussianity.name().into(),
            pass: !reports.is_empty() && reports.iter().all(|r| r.pass),
            worst,
            tolerance: stats::AD_CRITICAL_1PCT,
            detail: format!(
                "{} iterations, {} runs, largest variance-ratio deviation {worst_ratio:.3}",
                reports.len(),
                histories.len()
            ),
        },
        reports,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            n: 32,
            delta: 0.5,
            ensemble: EnsembleSpec::RowOrthogonalHaar {},
            prior: Prior::Bg { p: 0.1 },
            sigma2: 0.01,
            t_max: 4,
            trials: 3,
            seed: 7,
            keep_history: false,
            checks: BTreeSet::new(),
            output_dir: "out".into(),
            scan: None,
            verify: VerifyConfig::default(),
        }
    }

    #[test]
    fn validation() {
        let mut c = small();
        c.delta = 0.01;
        assert!(c.validate().is_err());
        let mut c = small();
        c.trials = 0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.prior = Prior::GaussianTestOnly {};
        assert!(c.validate().is_err());
        let mut c = small();
        c.checks.insert(Check::Gaussianity);
        assert!(c.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let c = small();
        let a = run_experiment(&c, Some(1)).unwrap();
        let b = run_experiment(&c, Some(3)).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.trial, y.trial);
            assert_eq!(x.iterations, y.iterations);
        }
    }

    #[test]
    fn aggregate_means_match_recomputation() {
        let out = run_experiment(&small(), None).unwrap();
        for row in &out.report.iterations {
            let xs: Vec<f64> = out.records.iter().filter_map(|r| mse_b_at(r, row.t)).collect();
            let naive = xs.iter().sum::<f64>() / xs.len() as f64;
            assert!((row.mse_b_mean - naive).abs() <= 1e-12 * naive.abs().max(1e-300));
        }
        assert_eq!(out.report.iterations.len(), 5);
    }
}
