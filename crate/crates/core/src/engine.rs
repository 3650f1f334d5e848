//! The two-module EP iteration on a concrete instance `y = A x + w`, and
//! the error vectors it generates.

use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::ensembles::{MeasurementModel, SpectralDensity};
use crate::linalg::{self, ComplexMatrix, ComplexVector, SvdFactors};
use crate::priors::{Prior, PriorError};
use crate::random::complex_normal_vec;
use crate::state_evolution;
use crate::stats::compensated_sum;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("message variance must be positive and finite, got {0}")]
    Variance(f64),
    #[error("message has non-finite entries")]
    NonFinite,
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("LMMSE filter is singular: sigma2 + v * s^2 underflows for v = {v:e}")]
    SingularFilter { v: f64 },
    #[error("all singular values vanish; the trace of W A is zero")]
    ZeroTrace,
    #[error("iteration {t}: module A produced v_AB = {v_ab:e} (gamma = {gamma:e}, v_BA = {v_ba:e})")]
    NonPositiveVariance { t: usize, gamma: f64, v_ab: f64, v_ba: f64 },
    #[error("the Gaussian prior is rejected: the decision function vanishes identically")]
    GaussianPrior,
    #[error("invalid options: {0}")]
    Options(String),
    #[error("noise variance must be positive and finite, got {0}")]
    NoiseVariance(f64),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    StateEvolution(#[from] state_evolution::SeError),
}

/// Mean vector and scalar variance passed between the two modules.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtrinsicMessage {
    pub mean: ComplexVector,
    pub variance: f64,
}

impl ExtrinsicMessage {
    pub fn new(mean: ComplexVector, variance: f64) -> Result<Self, EngineError> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(EngineError::Variance(variance));
        }
        if !linalg::is_finite(&mean) {
            return Err(EngineError::NonFinite);
        }
        Ok(Self { mean, variance })
    }

    /// Prior mean and variance of a unit-power signal.
    pub fn initial(n: usize) -> Self {
        Self {
            mean: vec![Complex64::new(0.0, 0.0); n],
            variance: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub model: MeasurementModel,
    pub x_true: ComplexVector,
    pub noise: ComplexVector,
    pub y: ComplexVector,
    pub sigma2: f64,
}

impl ProblemInstance {
    pub fn new(
        model: MeasurementModel,
        x_true: ComplexVector,
        noise: ComplexVector,
        sigma2: f64,
    ) -> Result<Self, EngineError> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(EngineError::NoiseVariance(sigma2));
        }
        if x_true.len() != model.n {
            return Err(EngineError::Length { expected: model.n, got: x_true.len() });
        }
        if noise.len() != model.m {
            return Err(EngineError::Length { expected: model.m, got: noise.len() });
        }
        let y = linalg::add(&model.factors.apply(&x_true), &noise);
        Ok(Self {
            model,
            x_true,
            noise,
            y,
            sigma2,
        })
    }

    /// Draws the signal, then the noise.
    pub fn generate<R: Rng + ?Sized>(
        model: MeasurementModel,
        prior: &Prior,
        sigma2: f64,
        rng: &mut R,
    ) -> Result<Self, EngineError> {
        let x = prior.sample(rng, model.n);
        let w = complex_normal_vec(rng, model.m, sigma2);
        Self::new(model, x, w, sigma2)
    }

    /// Same signal and noise measured through a different matrix.
    pub fn with_model(&self, model: MeasurementModel) -> Result<Self, EngineError> {
        Self::new(model, self.x_true.clone(), self.noise.clone(), self.sigma2)
    }

    pub fn n(&self) -> usize {
        self.model.n
    }
}

fn filter_denominators(factors: &SvdFactors, sigma2: f64, v: f64) -> Result<Vec<f64>, EngineError> {
    let d: Vec<f64> = factors.singular().iter().map(|s| sigma2 + v * s * s).collect();
    if d.iter().any(|x| !(*x >= 1e-300)) {
        return Err(EngineError::SingularFilter { v });
    }
    Ok(d)
}

/// `A^H (sigma2 I + v A A^H)^{-1} r`, evaluated as
/// `V [Sigma (sigma2 + v Sigma^2)^{-1} U^H r; 0]`.
pub fn lmmse_apply(
    factors: &SvdFactors,
    sigma2: f64,
    v: f64,
    residual: &[Complex64],
) -> Result<ComplexVector, EngineError> {
    if residual.len() != factors.rows() {
        return Err(EngineError::Length { expected: factors.rows(), got: residual.len() });
    }
    let d = filter_denominators(factors, sigma2, v)?;
    let t = factors.left().apply_adjoint(residual);
    let mut padded = vec![Complex64::new(0.0, 0.0); factors.cols()];
    for (i, (s, di)) in factors.singular().iter().zip(&d).enumerate() {
        padded[i] = t[i] * (s / di);
    }
    Ok(factors.right().apply(&padded))
}

/// `[N^{-1} sum_i s_i^2 / (sigma2 + v s_i^2)]^{-1}`, the inverse normalized
/// trace of `W A`.
pub fn gamma_finite(factors: &SvdFactors, sigma2: f64, v: f64, n: usize) -> Result<f64, EngineError> {
    let d = filter_denominators(factors, sigma2, v)?;
    let trace = compensated_sum(factors.singular().iter().zip(&d).map(|(s, di)| s * s / di));
    if trace <= 0.0 {
        return Err(EngineError::ZeroTrace);
    }
    Ok(n as f64 / trace)
}

/// How module A computes its normalization.
#[derive(Clone, Debug, Default)]
pub enum GammaMode {
    /// Finite-size trace of the realized spectrum.
    #[default]
    Finite,
    /// Large-system functional of a given eigenvalue law.
    Asymptotic { density: SpectralDensity, delta: f64 },
}

impl GammaMode {
    pub fn gamma(&self, instance: &ProblemInstance, v: f64) -> Result<f64, EngineError> {
        match self {
            GammaMode::Finite => gamma_finite(&instance.model.factors, instance.sigma2, v, instance.n()),
            GammaMode::Asymptotic { density, delta } => {
                Ok(state_evolution::gamma_asymptotic(density, *delta, instance.sigma2, v)?)
            }
        }
    }
}

/// Module A: returns the A-to-B message and `gamma_t`.
pub fn module_a_update(
    msg: &ExtrinsicMessage,
    instance: &ProblemInstance,
    mode: &GammaMode,
) -> Result<(ExtrinsicMessage, f64), EngineError> {
    let factors = &instance.model.factors;
    let gamma = mode.gamma(instance, msg.variance)?;
    let residual = linalg::sub(&instance.y, &factors.apply(&msg.mean));
    let filtered = lmmse_apply(factors, instance.sigma2, msg.variance, &residual)?;
    let mut mean = msg.mean.clone();
    linalg::axpy(Complex64::new(gamma, 0.0), &filtered, &mut mean);
    let variance = gamma - msg.variance;
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(EngineError::NonPositiveVariance {
            t: 0,
            gamma,
            v_ab: variance,
            v_ba: msg.variance,
        });
    }
    Ok((ExtrinsicMessage { mean, variance }, gamma))
}

/// Module B: returns the B-to-A message and the posterior estimate.
pub fn module_b_update(
    msg: &ExtrinsicMessage,
    prior: &Prior,
) -> Result<(ExtrinsicMessage, ComplexVector), EngineError> {
    if prior.is_gaussian() {
        return Err(EngineError::GaussianPrior);
    }
    Ok(prior.extrinsic_denoise(msg)?)
}

#[derive(Clone, Debug)]
pub struct EngineOptions {
    pub keep_history: bool,
    /// Weight of the new B-to-A message; 1 means undamped.
    pub damping: f64,
    /// Stop once `|v_BA^{t+1} - v_BA^t| < tol * v_BA^t`.
    pub early_stop: Option<f64>,
    pub gamma: GammaMode,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            keep_history: false,
            damping: 1.0,
            early_stop: None,
            gamma: GammaMode::Finite,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    Converged,
    /// Module B had no extrinsic information left to return.
    Uninformative,
}

/// Per-iteration diagnostics. Index `t` pairs `q_t = x - x_BA^t` with
/// `h_t = x - x_AB^t`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub t: usize,
    pub v_ab: f64,
    pub v_ba: f64,
    pub gamma: f64,
    /// `N^{-1} ||q_t||^2`
    pub mse_b_emp: f64,
    /// `N^{-1} ||x - eta_tilde(x_AB^t)||^2`
    pub mse_post_emp: f64,
    /// `N^{-1} ||h_t||^2`
    pub mse_a_emp: f64,
    /// `N^{-1} h_t^H q_t`
    pub h_dot_q: Complex64,
    /// `N^{-1} b_t^H m_t`
    pub b_dot_m: Complex64,
}

/// Error vectors `q_t`, `b_t = V^H q_t`, `m_t = V^H h_t` and `h_t`.
#[derive(Clone, Debug, Default)]
pub struct History {
    pub q: Vec<ComplexVector>,
    pub b: Vec<ComplexVector>,
    pub m: Vec<ComplexVector>,
    pub h: Vec<ComplexVector>,
}

impl History {
    fn stack(cols: &[ComplexVector], k: usize) -> ComplexMatrix {
        let n = cols.first().map_or(0, |c| c.len());
        ComplexMatrix::from_columns(n, &cols[..k])
    }

    /// `Q_k = [q_0, ..., q_{k-1}]`.
    pub fn q_matrix(&self, k: usize) -> ComplexMatrix {
        Self::stack(&self.q, k)
    }

    pub fn b_matrix(&self, k: usize) -> ComplexMatrix {
        Self::stack(&self.b, k)
    }

    pub fn m_matrix(&self, k: usize) -> ComplexMatrix {
        Self::stack(&self.m, k)
    }

    pub fn h_matrix(&self, k: usize) -> ComplexMatrix {
        Self::stack(&self.h, k)
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub iterations: Vec<IterationRecord>,
    /// `N^{-1} ||q_T||^2` after the last completed module-B update.
    pub final_mse_b: Option<f64>,
    /// `cross[t][s] = N^{-1} h_t^H q_s` for `s <= t + 1`.
    pub cross: Vec<Vec<Complex64>>,
    pub stop: StopReason,
    pub history: Option<History>,
    /// Final posterior estimate.
    pub estimate: ComplexVector,
}

impl RunRecord {
    /// Empirical `N^{-1} ||q_t||^2` for every available `t`.
    pub fn mse_b_trajectory(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.iterations.iter().map(|r| r.mse_b_emp).collect();
        v.extend(self.final_mse_b);
        v
    }
}

fn normalized_dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    linalg::dot(a, b) / a.len() as f64
}

/// Runs `t_max` iterations from the prior message `(0, 1)`.
pub fn run_ep(
    instance: &ProblemInstance,
    prior: &Prior,
    t_max: usize,
    opts: &EngineOptions,
) -> Result<RunRecord, EngineError> {
    if t_max == 0 {
        return Err(EngineError::Options("t_max must be at least 1".into()));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(EngineError::Options(format!("damping {} not in (0, 1]", opts.damping)));
    }
    if prior.is_gaussian() {
        return Err(EngineError::GaussianPrior);
    }
    prior.validate()?;
    let n = instance.n();
    let x = &instance.x_true;
    let right = instance.model.factors.right();
    let nf = n as f64;

    let mut msg = ExtrinsicMessage::initial(n);
    let mut iterations = Vec::with_capacity(t_max);
    let mut qs: Vec<ComplexVector> = Vec::with_capacity(t_max + 1);
    let mut hs: Vec<ComplexVector> = Vec::with_capacity(t_max);
    let mut history = History::default();
    let mut stop = StopReason::MaxIterations;
    let mut estimate = msg.mean.clone();

    for t in 0..t_max {
        let q = linalg::sub(x, &msg.mean);
        let (ab, gamma) = module_a_update(&msg, instance, &opts.gamma).map_err(|e| match e {
            EngineError::NonPositiveVariance { gamma, v_ab, v_ba, .. } => {
                EngineError::NonPositiveVariance { t, gamma, v_ab, v_ba }
            }
            e => e,
        })?;
        let h = linalg::sub(x, &ab.mean);
        let b = right.apply_adjoint(&q);
        let m = right.apply_adjoint(&h);

        let (next, posterior, done) = match module_b_update(&ab, prior) {
            Ok((next, post)) => (Some(next), post, None),
            Err(EngineError::Prior(PriorError::Uninformative { .. })) => {
                let post = ab
                    .mean
                    .iter()
                    .map(|&r| prior.posterior_mean(r, ab.variance))
                    .collect::<Result<Vec<_>, _>>()?;
                (None, post, Some(StopReason::Uninformative))
            }
            Err(e) => return Err(e),
        };

        iterations.push(IterationRecord {
            t,
            v_ab: ab.variance,
            v_ba: msg.variance,
            gamma,
            mse_b_emp: linalg::norm_sqr(&q) / nf,
            mse_post_emp: linalg::norm_sqr(&linalg::sub(x, &posterior)) / nf,
            mse_a_emp: linalg::norm_sqr(&h) / nf,
            h_dot_q: normalized_dot(&h, &q),
            b_dot_m: normalized_dot(&b, &m),
        });
        estimate = posterior;
        qs.push(q);
        hs.push(h);
        if opts.keep_history {
            history.b.push(b);
            history.m.push(m);
        }

        let Some(mut next) = next else {
            stop = done.expect("set with the message");
            break;
        };
        if opts.damping < 1.0 {
            let a = opts.damping;
            for (new, old) in next.mean.iter_mut().zip(&msg.mean) {
                *new = *new * a + *old * (1.0 - a);
            }
            next.variance = a * next.variance + (1.0 - a) * msg.variance;
        }
        let converged = opts
            .early_stop
            .is_some_and(|tol| (next.variance - msg.variance).abs() < tol * msg.variance);
        msg = next;
        if t + 1 == t_max || converged {
            qs.push(linalg::sub(x, &msg.mean));
            if opts.keep_history {
                history.b.push(right.apply_adjoint(qs.last().expect("just pushed")));
            }
            if converged {
                stop = StopReason::Converged;
                break;
            }
        }
    }

    let final_mse_b = (qs.len() > hs.len()).then(|| linalg::norm_sqr(qs.last().expect("nonempty")) / nf);
    let cross = hs
        .iter()
        .enumerate()
        .map(|(t, h)| qs.iter().take(t + 2).map(|q| normalized_dot(h, q)).collect())
        .collect();
    let history = opts.keep_history.then(|| {
        history.q = qs;
        history.h = hs;
        history
    });
    Ok(RunRecord {
        iterations,
        final_mse_b,
        cross,
        stop,
        history,
        estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::{build_measurement, EnsembleSpec};
    use crate::random::stream_rng;

    const BG: Prior = Prior::Bg { p: 0.1 };

    fn instance(spec: &EnsembleSpec, m: usize, n: usize, sigma2: f64, seed: u64) -> ProblemInstance {
        let mut rng = stream_rng(seed, 0);
        let model = build_measurement(spec, m, n, &mut rng).unwrap();
        ProblemInstance::generate(model, &BG, sigma2, &mut rng).unwrap()
    }

    #[test]
    fn lmmse_matches_dense_solve() {
        let inst = instance(&EnsembleSpec::GeometricSpectrumHaar { kappa: 10.0 }, 12, 20, 0.05, 1);
        let mut rng = stream_rng(1, 1);
        let r = complex_normal_vec(&mut rng, 12, 1.0);
        let v = 0.3;
        let fast = lmmse_apply(&inst.model.factors, 0.05, v, &r).unwrap();
        let a = inst.model.dense();
        let gram = a
            .matmul(&a.adjoint())
            .scale(Complex64::new(v, 0.0))
            .add(&ComplexMatrix::identity(12).scale(Complex64::new(0.05, 0.0)));
        let z = linalg::solve(&gram, &ComplexMatrix::column_matrix(&r)).unwrap();
        let dense = a.adjoint().matvec(&z.column(0));
        assert!(linalg::relative_vector_residual(&fast, &dense) < 1e-9);
    }

    #[test]
    fn lmmse_isotropic_and_zero_cases() {
        let inst = instance(&EnsembleSpec::RowOrthogonalHaar {}, 16, 16, 0.1, 2);
        let mut rng = stream_rng(2, 1);
        let r = complex_normal_vec(&mut rng, 16, 1.0);
        let out = lmmse_apply(&inst.model.factors, 0.1, 0.4, &r).unwrap();
        let ratio = linalg::norm_sqr(&out).sqrt() / linalg::norm_sqr(&r).sqrt();
        assert!((ratio - 1.0 / 0.5).abs() < 1e-12);
        let zero = lmmse_apply(&inst.model.factors, 0.1, 0.4, &vec![Complex64::new(0.0, 0.0); 16]).unwrap();
        assert!(zero.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn gamma_finite_cases() {
        let inst = instance(&EnsembleSpec::RowOrthogonalHaar {}, 8, 8, 0.1, 3);
        let g = gamma_finite(&inst.model.factors, 0.1, 0.7, 8).unwrap();
        assert!((g - 0.8).abs() < 1e-14);
        let g = gamma_finite(&inst.model.factors, 1e12, 0.7, 8).unwrap();
        assert!(1.0 / g < 1e-11);
    }

    #[test]
    fn module_a_closed_forms() {
        let inst = instance(&EnsembleSpec::RowOrthogonalHaar {}, 32, 32, 0.01, 4);
        let (ab, gamma) = module_a_update(&ExtrinsicMessage::initial(32), &inst, &GammaMode::Finite).unwrap();
        assert!((gamma - 1.01).abs() < 1e-14);
        assert!((ab.variance - 0.01).abs() < 1e-14);

        // A zero residual leaves the mean unchanged.
        let mut fitted = inst.clone();
        let xba = complex_normal_vec(&mut stream_rng(4, 1), 32, 1.0);
        fitted.y = inst.model.factors.apply(&xba);
        let msg = ExtrinsicMessage::new(xba.clone(), 0.5).unwrap();
        let (ab, _) = module_a_update(&msg, &fitted, &GammaMode::Finite).unwrap();
        assert!(linalg::relative_vector_residual(&ab.mean, &xba) < 1e-12);
    }

    #[test]
    fn gaussian_prior_is_rejected() {
        let inst = instance(&EnsembleSpec::RowOrthogonalHaar {}, 8, 16, 0.01, 5);
        let msg = ExtrinsicMessage::initial(16);
        assert_eq!(
            module_b_update(&msg, &Prior::GaussianTestOnly {}).unwrap_err(),
            EngineError::GaussianPrior
        );
        assert!(run_ep(&inst, &Prior::GaussianTestOnly {}, 3, &EngineOptions::default()).is_err());
    }

    #[test]
    fn single_atom_variance_is_noise_level() {
        let inst = instance(&EnsembleSpec::RowOrthogonalHaar {}, 64, 64, 0.01, 6);
        let rec = run_ep(&inst, &BG, 8, &EngineOptions::default()).unwrap();
        for it in &rec.iterations {
            assert!((it.v_ab - 0.01).abs() < 1e-12 * 0.01 + 1e-15, "{}", it.v_ab);
        }
    }

    #[test]
    fn uninformative_measurements_keep_unit_error() {
        let inst = instance(&EnsembleSpec::RowOrthogonalHaar {}, 128, 256, 1e8, 7);
        let rec = run_ep(&inst, &BG, 5, &EngineOptions::default()).unwrap();
        for it in &rec.iterations {
            assert!((it.v_ba - 1.0).abs() < 1e-3);
        }
        // Nothing is learned: the error stays at the signal power.
        let power = linalg::norm_sqr(&inst.x_true) / 256.0;
        for mse in rec.mse_b_trajectory() {
            assert!((mse - power).abs() < 0.05 * power, "{mse} vs {power}");
        }
    }

    #[test]
    fn history_shapes_and_error_recursion() {
        let sigma2 = 0.01;
        let inst = instance(&EnsembleSpec::GeometricSpectrumHaar { kappa: 5.0 }, 48, 64, sigma2, 8);
        let opts = EngineOptions {
            keep_history: true,
            ..Default::default()
        };
        let rec = run_ep(&inst, &BG, 4, &opts).unwrap();
        let h = rec.history.as_ref().unwrap();
        assert_eq!((h.q.len(), h.b.len(), h.m.len(), h.h.len()), (5, 5, 4, 4));
        assert_eq!(rec.cross.len(), 4);
        assert_eq!(rec.cross[3].len(), 5);
        // m_t = b_t - gamma_t W~ (Sigma~ b_t + U^H w), with W~ = (Sigma, O)^H (sigma2 + v Sigma^2)^{-1}.
        let f = &inst.model.factors;
        let wt = f.left().apply_adjoint(&inst.noise);
        for (t, it) in rec.iterations.iter().enumerate() {
            let b = &h.b[t];
            let mut expected = b.clone();
            for (i, s) in f.singular().iter().enumerate() {
                let inner = b[i] * *s + wt[i];
                expected[i] -= inner * (it.gamma * s / (sigma2 + it.v_ba * s * s));
            }
            assert!(linalg::relative_vector_residual(&expected, &h.m[t]) < 1e-10);
            // h_t = V m_t, q_t = V b_t
            assert!(linalg::relative_vector_residual(&f.right().apply(&h.m[t]), &h.h[t]) < 1e-10);
        }
    }

    #[test]
    fn early_stop_and_damping_options() {
        let inst = instance(&EnsembleSpec::RowOrthogonalHaar {}, 64, 128, 1e-3, 9);
        let opts = EngineOptions {
            early_stop: Some(1e-8),
            ..Default::default()
        };
        let rec = run_ep(&inst, &BG, 200, &opts).unwrap();
        assert_eq!(rec.stop, StopReason::Converged);
        assert!(rec.iterations.len() < 200);
        let bad = EngineOptions {
            damping: 0.0,
            ..Default::default()
        };
        assert!(run_ep(&inst, &BG, 3, &bad).is_err());
        let damped = EngineOptions {
            damping: 0.7,
            ..Default::default()
        };
        assert_eq!(run_ep(&inst, &BG, 5, &damped).unwrap().iterations.len(), 5);
    }

    #[test]
    fn runs_are_deterministic() {
        let a = run_ep(&instance(&EnsembleSpec::IidGaussian {}, 30, 60, 0.01, 10), &BG, 5, &EngineOptions::default())
            .unwrap();
        let b = run_ep(&instance(&EnsembleSpec::IidGaussian {}, 30, 60, 0.01, 10), &BG, 5, &EngineOptions::default())
            .unwrap();
        assert_eq!(a.iterations, b.iterations);
    }
}
