//! Large-system state evolution, its fixed points and the compression
//! threshold above which the fixed point is unique.

use serde::Serialize;
use thiserror::Error;

use crate::ensembles::{EnsembleError, SpectralDensity};
use crate::priors::{Prior, PriorError};
use crate::stats::compensated_sum;

pub const FP_TOLERANCE: f64 = 1e-12;
pub const FP_DEDUP: f64 = 1e-8;
pub const FP_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SeError {
    #[error("compression rate {0} not in (0, 1]")]
    Delta(f64),
    #[error("variance must be positive and finite, got {0}")]
    Variance(f64),
    #[error("gamma diverges: sigma2 + v * lambda vanishes or the spectrum is zero (v = {v:e})")]
    Divergent { v: f64 },
    #[error("MMSE {mmse:e} is not below the input variance {v:e}")]
    NoInformation { v: f64, mmse: f64 },
    #[error("empty start grid")]
    EmptyGrid,
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

fn check_delta(delta: f64) -> Result<(), SeError> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        Err(SeError::Delta(delta))
    }
}

/// `[sum w delta lambda / (sigma2 + v lambda)]^{-1}`.
pub fn gamma_asymptotic(density: &SpectralDensity, delta: f64, sigma2: f64, v: f64) -> Result<f64, SeError> {
    check_delta(delta)?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(SeError::Variance(v));
    }
    if !(sigma2 >= 0.0) || !(sigma2 + v * density.min_eigenvalue() > 0.0) {
        return Err(SeError::Divergent { v });
    }
    let inv = compensated_sum(density.atoms().iter().map(|&(l, w)| w * delta * l / (sigma2 + v * l)));
    if !(inv > 0.0) {
        return Err(SeError::Divergent { v });
    }
    Ok(1.0 / inv)
}

/// Cross term `gamma_{t,s} = gamma_t gamma_s sum w delta lambda (sigma2 +
/// zeta lambda) / ((sigma2 + v_t lambda)(sigma2 + v_s lambda))`, the limit of
/// `N^{-1} m_s^H m_t + zeta` for `zeta = N^{-1} q_s^H q_t`.
pub fn gamma_cross(
    density: &SpectralDensity,
    delta: f64,
    sigma2: f64,
    v_t: f64,
    v_s: f64,
    zeta: f64,
) -> Result<f64, SeError> {
    let gt = gamma_asymptotic(density, delta, sigma2, v_t)?;
    let gs = gamma_asymptotic(density, delta, sigma2, v_s)?;
    let sum = compensated_sum(density.atoms().iter().map(|&(l, w)| {
        w * delta * l * (sigma2 + zeta * l) / ((sigma2 + v_t * l) * (sigma2 + v_s * l))
    }));
    Ok(gt * gs * sum)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeStep {
    pub mse_ab: f64,
    pub mse_ba_next: f64,
    pub mse_post: f64,
}

pub fn se_step(
    mse_ba: f64,
    density: &SpectralDensity,
    delta: f64,
    sigma2: f64,
    prior: &Prior,
) -> Result<SeStep, SeError> {
    if !(mse_ba > 0.0 && mse_ba.is_finite()) {
        return Err(SeError::Variance(mse_ba));
    }
    let mse_ab = gamma_asymptotic(density, delta, sigma2, mse_ba)? - mse_ba;
    if !(mse_ab > 0.0) {
        return Err(SeError::Variance(mse_ab));
    }
    let mmse = prior.mmse(mse_ab)?;
    let info = 1.0 / mmse - 1.0 / mse_ab;
    if !(info > 0.0) {
        return Err(SeError::NoInformation { v: mse_ab, mmse });
    }
    Ok(SeStep {
        mse_ab,
        mse_ba_next: 1.0 / info,
        mse_post: mmse,
    })
}

/// Deterministic trajectory from `mse_BA^0 = 1`. `mse_ba` has one more entry
/// than the other two sequences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeTrace {
    pub mse_ab: Vec<f64>,
    pub mse_ba: Vec<f64>,
    pub mse_post: Vec<f64>,
}

impl SeTrace {
    pub fn len(&self) -> usize {
        self.mse_ab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mse_ab.is_empty()
    }
}

pub fn se_run(
    density: &SpectralDensity,
    delta: f64,
    sigma2: f64,
    prior: &Prior,
    t_max: usize,
) -> Result<SeTrace, SeError> {
    let mut trace = SeTrace {
        mse_ab: Vec::with_capacity(t_max),
        mse_ba: vec![1.0],
        mse_post: Vec::with_capacity(t_max),
    };
    for _ in 0..t_max {
        let s = se_step(*trace.mse_ba.last().expect("nonempty"), density, delta, sigma2, prior)?;
        trace.mse_ab.push(s.mse_ab);
        trace.mse_post.push(s.mse_post);
        trace.mse_ba.push(s.mse_ba_next);
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StartOutcome {
    pub start: f64,
    pub fixed_point: Option<f64>,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixedPoint {
    pub mse_ba: f64,
    pub mse_post: f64,
    /// Starting values that converged here.
    pub basin: Vec<f64>,
    /// Whether the iteration from `mse_BA = 1` ends here.
    pub reachable_from_one: bool,
    /// `|SE(fp) - fp|`
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub fixed_points: Vec<FixedPoint>,
    pub starts: Vec<StartOutcome>,
    pub iterations_to_converge: usize,
    pub converged: bool,
}

fn iterate_to_fixed_point(
    start: f64,
    density: &SpectralDensity,
    delta: f64,
    sigma2: f64,
    prior: &Prior,
) -> Result<StartOutcome, SeError> {
    let mut v = start;
    for k in 1..=FP_MAX_ITERATIONS {
        let next = se_step(v, density, delta, sigma2, prior)?.mse_ba_next;
        if (next - v).abs() <= FP_TOLERANCE * v.max(next) {
            return Ok(StartOutcome {
                start,
                fixed_point: Some(next),
                iterations: k,
            });
        }
        v = next;
    }
    Ok(StartOutcome {
        start,
        fixed_point: None,
        iterations: FP_MAX_ITERATIONS,
    })
}

/// Iterates the SE map from every start in `init_grid` (and from 1) and
/// groups the limits.
pub fn find_fixed_points(
    density: &SpectralDensity,
    delta: f64,
    sigma2: f64,
    prior: &Prior,
    init_grid: &[f64],
) -> Result<FixedPointReport, SeError> {
    if init_grid.is_empty() {
        return Err(SeError::EmptyGrid);
    }
    let mut starts = Vec::with_capacity(init_grid.len());
    for &s in init_grid {
        if !(s > 0.0 && s <= 1.0) {
            return Err(SeError::Variance(s));
        }
        starts.push(iterate_to_fixed_point(s, density, delta, sigma2, prior)?);
    }
    let from_one = match starts.iter().find(|o| o.start == 1.0) {
        Some(o) => o.clone(),
        None => iterate_to_fixed_point(1.0, density, delta, sigma2, prior)?,
    };

    let mut fixed_points: Vec<FixedPoint> = Vec::new();
    for o in &starts {
        let Some(fp) = o.fixed_point else { continue };
        match fixed_points.iter_mut().find(|p| (p.mse_ba - fp).abs() <= FP_DEDUP) {
            Some(p) => p.basin.push(o.start),
            None => {
                let step = se_step(fp, density, delta, sigma2, prior)?;
                fixed_points.push(FixedPoint {
                    mse_ba: fp,
                    mse_post: step.mse_post,
                    basin: vec![o.start],
                    reachable_from_one: false,
                    residual: (step.mse_ba_next - fp).abs(),
                });
            }
        }
    }
    if let Some(fp) = from_one.fixed_point {
        if let Some(p) = fixed_points.iter_mut().find(|p| (p.mse_ba - fp).abs() <= FP_DEDUP) {
            p.reachable_from_one = true;
        }
    }
    fixed_points.sort_by(|a, b| a.mse_ba.total_cmp(&b.mse_ba));
    Ok(FixedPointReport {
        iterations_to_converge: starts.iter().map(|o| o.iterations).max().unwrap_or(0),
        converged: starts.iter().all(|o| o.fixed_point.is_some()),
        fixed_points,
        starts,
    })
}

/// Default start grid: log-spaced in `[1e-6, 1]`.
pub fn default_init_grid(points: usize) -> Vec<f64> {
    let points = points.max(2);
    (0..points)
        .map(|i| 10f64.powf(-6.0 * (1.0 - i as f64 / (points - 1) as f64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanRow {
    pub delta: f64,
    pub fp_count: usize,
    pub fp_values: Vec<f64>,
    pub converged: bool,
}

/// Fixed-point structure over a sweep of compression rates. `family` maps a
/// rate to its eigenvalue law.
pub fn threshold_scan<F>(
    family: F,
    sigma2: f64,
    prior: &Prior,
    deltas: &[f64],
    init_grid: &[f64],
) -> Result<Vec<ScanRow>, SeError>
where
    F: Fn(f64) -> Result<SpectralDensity, SeError> + Sync,
{
    use rayon::prelude::*;
    deltas
        .par_iter()
        .map(|&delta| {
            let density = family(delta)?;
            let r = find_fixed_points(&density, delta, sigma2, prior, init_grid)?;
            Ok(ScanRow {
                delta,
                fp_count: r.fixed_points.len(),
                fp_values: r.fixed_points.iter().map(|p| p.mse_ba).collect(),
                converged: r.converged,
            })
        })
        .collect()
}

/// Bisection on the rate for the point where the fixed-point count changes
/// between `lo` and `hi`. Returns `None` when both ends have the same count.
pub fn find_threshold<F>(
    family: F,
    sigma2: f64,
    prior: &Prior,
    (mut lo, mut hi): (f64, f64),
    init_grid: &[f64],
    tol: f64,
) -> Result<Option<f64>, SeError>
where
    F: Fn(f64) -> Result<SpectralDensity, SeError>,
{
    let count = |delta: f64| -> Result<usize, SeError> {
        let d = family(delta)?;
        Ok(find_fixed_points(&d, delta, sigma2, prior, init_grid)?.fixed_points.len())
    };
    let c_lo = count(lo)?;
    if c_lo == count(hi)? {
        return Ok(None);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if count(mid)? == c_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}
