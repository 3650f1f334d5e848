//! Numerical checks of Haar-matrix facts: low-order moments, the trace
//! central limit theorem, laws of large numbers, and the conditional mean of
//! a Haar matrix given linear constraints from an EP run.

use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::engine::{self, EngineError, EngineOptions, History, ProblemInstance};
use crate::ensembles::{
    build_measurement, sample_haar, sample_haar_qr, sample_haar_reflectors, EnsembleError, EnsembleSpec, MeasurementModel,
};
use crate::linalg::{self, ComplexMatrix, ComplexVector, LinalgError, Unitary, RANK_TOL};
use crate::priors::Prior;
use crate::random::{complex_normal_vec, stream_rng};
use crate::stats::{self, MeanEstimate};

/// Tolerance of the exact conditioning identities.
pub const IDENTITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HaarError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid snapshot: {0}")]
    Snapshot(String),
    #[error("matrix family is not trace-orthonormal: Gram error {0:e}")]
    TraceFamily(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

const C0: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Clone, Debug, Serialize)]
pub struct MomentStat {
    pub name: String,
    pub theory: f64,
    pub estimate: MeanEstimate,
    pub z: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentReport {
    pub n: usize,
    pub samples: usize,
    pub stats: Vec<MomentStat>,
    pub pass: bool,
}

struct MomentAccumulator {
    names: Vec<String>,
    theory: Vec<f64>,
    sums: Vec<(f64, f64)>,
}

impl MomentAccumulator {
    fn new(n: usize) -> Self {
        let nf = n as f64;
        let rows: Vec<(&str, f64)> = vec![
            ("E|V00|^2", 1.0 / nf),
            ("E|V01|^2", 1.0 / nf),
            ("E|V00|^4", 2.0 / (nf * (nf + 1.0))),
            ("E|V00|^2|V11|^2", 1.0 / (nf * nf - 1.0)),
            ("E|V00|^2|V01|^2", 1.0 / (nf * (nf + 1.0))),
            ("E|V00|^2|V10|^2", 1.0 / (nf * (nf + 1.0))),
            ("Re E[V00 V11 V01* V10*]", -1.0 / (nf * (nf * nf - 1.0))),
            ("Im E[V00 V11 V01* V10*]", 0.0),
            ("Re E[V00]", 0.0),
            ("Im E[V00]", 0.0),
            ("Re E[V00^2]", 0.0),
            ("Im E[V00^2]", 0.0),
            ("Re E[V00 V11*]", 0.0),
            ("Im E[V00 V11*]", 0.0),
            ("Re E[V00 V11]", 0.0),
            ("Re E[|V00|^2 V00]", 0.0),
            ("Re E[V00^2 V11*^2]", 0.0),
        ];
        Self {
            names: rows.iter().map(|r| r.0.to_string()).collect(),
            theory: rows.iter().map(|r| r.1).collect(),
            sums: vec![(0.0, 0.0); rows.len()],
        }
    }

    fn push(&mut self, v00: Complex64, v01: Complex64, v10: Complex64, v11: Complex64) {
        let (a00, a01, a10, a11) = (v00.norm_sqr(), v01.norm_sqr(), v10.norm_sqr(), v11.norm_sqr());
        let four = v00 * v11 * v01.conj() * v10.conj();
        let vals = [
            a00,
            a01,
            a00 * a00,
            a00 * a11,
            a00 * a01,
            a00 * a10,
            four.re,
            four.im,
            v00.re,
            v00.im,
            (v00 * v00).re,
            (v00 * v00).im,
            (v00 * v11.conj()).re,
            (v00 * v11.conj()).im,
            (v00 * v11).re,
            (v00 * a00).re,
            (v00 * v00 * (v11 * v11).conj()).re,
        ];
        for (s, x) in self.sums.iter_mut().zip(vals) {
            s.0 += x;
            s.1 += x * x;
        }
    }

    fn finish(self, n: usize, samples: usize, sigmas: f64) -> MomentReport {
        let stats: Vec<MomentStat> = self
            .names
            .into_iter()
            .zip(self.theory)
            .zip(self.sums)
            .map(|((name, theory), (s, q))| {
                let estimate = MeanEstimate::from_moments(s, q, samples);
                let z = estimate.z_score(theory);
                MomentStat {
                    name,
                    theory,
                    estimate,
                    z,
                    pass: z <= sigmas,
                }
            })
            .collect();
        MomentReport {
            n,
            samples,
            pass: stats.iter().all(|s| s.pass),
            stats,
        }
    }
}

/// Second- and fourth-order moments of the top-left 2x2 block against their
/// exact finite-`n` values, and a selection of moments that must vanish.
pub fn moment_check<R: Rng + ?Sized>(
    n: usize,
    samples: usize,
    sigmas: f64,
    rng: &mut R,
) -> Result<MomentReport, HaarError> {
    if n < 2 || samples < 2 {
        return Err(HaarError::Parameter("need n >= 2 and at least two samples".into()));
    }
    let mut acc = MomentAccumulator::new(n);
    for _ in 0..samples {
        let h = sample_haar_reflectors(n, rng);
        let (c0, c1) = (h.column(0), h.column(1));
        acc.push(c0[0], c1[0], c0[1], c1[1]);
    }
    Ok(acc.finish(n, samples, sigmas))
}

/// Fixed unitaries used to probe two-sided invariance: a unitary DFT on the
/// left and a phased cyclic shift on the right.
fn fixed_rotations(n: usize) -> (ComplexMatrix, ComplexMatrix) {
    let nf = n as f64;
    let dft = ComplexMatrix::from_fn(n, n, |j, k| {
        Complex64::from_polar(1.0 / nf.sqrt(), -2.0 * std::f64::consts::PI * (j * k) as f64 / nf)
    });
    let shift = ComplexMatrix::from_fn(n, n, |j, k| {
        if j == (k + 1) % n {
            Complex64::from_polar(1.0, 0.7 * k as f64)
        } else {
            C0
        }
    });
    (dft, shift)
}

/// Same statistics as [`moment_check`] for `P V Q` with fixed unitaries
/// `P`, `Q`.
pub fn biunitary_check<R: Rng + ?Sized>(
    n: usize,
    samples: usize,
    sigmas: f64,
    rng: &mut R,
) -> Result<MomentReport, HaarError> {
    if n < 2 || samples < 2 {
        return Err(HaarError::Parameter("need n >= 2 and at least two samples".into()));
    }
    let (p, q) = fixed_rotations(n);
    let mut acc = MomentAccumulator::new(n);
    for _ in 0..samples {
        let w = p.matmul(&sample_haar(n, rng)).matmul(&q);
        acc.push(w[(0, 0)], w[(0, 1)], w[(1, 0)], w[(1, 1)]);
    }
    Ok(acc.finish(n, samples, sigmas))
}

/// `W_i = S^{i} D_i` with `S` the cyclic shift and `D_i` diagonal phases, so
/// that `Tr(W_i W_j^H) = n delta_ij`. Only the shift and phases are stored.
#[derive(Clone, Debug)]
pub struct PermutationFamily {
    n: usize,
    phases: Vec<Vec<Complex64>>,
}

impl PermutationFamily {
    pub fn new(n: usize, k: usize) -> Result<Self, HaarError> {
        if k == 0 || k > n {
            return Err(HaarError::Parameter(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
        }
        let phases = (0..k)
            .map(|i| {
                (0..n)
                    .map(|j| Complex64::from_polar(1.0, 0.37 * ((i + 1) * (j + 3)) as f64))
                    .collect()
            })
            .collect();
        Ok(Self { n, phases })
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn dense(&self, i: usize) -> ComplexMatrix {
        let n = self.n;
        ComplexMatrix::from_fn(n, n, |r, c| if r == (c + i) % n { self.phases[i][c] } else { C0 })
    }

    /// Largest entry of `Gram / n - I`.
    pub fn gram_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.len() {
            for j in 0..self.len() {
                let wi = self.dense(i);
                let wj = self.dense(j);
                let g = wi.matmul(&wj.adjoint()).trace() / self.n as f64;
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).norm());
            }
        }
        worst
    }

    /// `Tr(V W_i) = sum_c V[c, c + i] D_i[c]`.
    pub fn trace_with(&self, v: &ComplexMatrix, i: usize) -> Complex64 {
        let n = self.n;
        (0..n).map(|c| v[(c, (c + i) % n)] * self.phases[i][c]).sum()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceCltReport {
    pub n: usize,
    pub k: usize,
    pub repeats: usize,
    /// `[Re, Im]` second moments per coordinate; each should be 1/2.
    pub variances: Vec<[MeanEstimate; 2]>,
    /// `E[a_i a_j^*]` real and imaginary parts for `i < j`.
    pub cross: Vec<(usize, usize, [MeanEstimate; 2])>,
    /// Also `E[a_i a_j]`, which vanishes for circular laws.
    pub pseudo_cross: Vec<(usize, usize, [MeanEstimate; 2])>,
    /// KS distance of the real parts of coordinate 0 to N(0, 1/2).
    pub ks_distance: f64,
    pub pass: bool,
}

/// Samples `a = (Tr(V W_1), ..., Tr(V W_k))` and compares with a standard
/// complex Gaussian vector.
pub fn trace_clt_check<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    repeats: usize,
    sigmas: f64,
    rng: &mut R,
) -> Result<TraceCltReport, HaarError> {
    if repeats < 2 {
        return Err(HaarError::Parameter("need at least two repeats".into()));
    }
    let family = PermutationFamily::new(n, k)?;
    if n <= 64 {
        let e = family.gram_error();
        if e > 1e-12 {
            return Err(HaarError::TraceFamily(e));
        }
    }
    let mut samples: Vec<Vec<Complex64>> = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let v = sample_haar_qr(n, rng);
        samples.push((0..k).map(|i| family.trace_with(&v, i)).collect());
    }
    let est = |f: &dyn Fn(&[Complex64]) -> f64| {
        let xs: Vec<f64> = samples.iter().map(|a| f(a)).collect();
        MeanEstimate::from_samples(&xs)
    };
    let mut variances = Vec::with_capacity(k);
    for i in 0..k {
        variances.push([est(&|a| a[i].re * a[i].re), est(&|a| a[i].im * a[i].im)]);
    }
    let mut cross = Vec::new();
    let mut pseudo_cross = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            cross.push((i, j, [est(&|a| (a[i] * a[j].conj()).re), est(&|a| (a[i] * a[j].conj()).im)]));
            pseudo_cross.push((i, j, [est(&|a| (a[i] * a[j]).re), est(&|a| (a[i] * a[j]).im)]));
        }
    }
    let re0: Vec<f64> = samples.iter().map(|a| a[0].re).collect();
    let ks_distance = stats::ks_normal(&re0, 0.0, 0.5f64.sqrt());
    let pass = variances.iter().flatten().all(|e| e.within(0.5, sigmas))
        && cross
            .iter()
            .chain(&pseudo_cross)
            .flat_map(|c| c.2.iter())
            .all(|e| e.within(0.0, sigmas));
    Ok(TraceCltReport {
        n,
        k,
        repeats,
        variances,
        cross,
        pseudo_cross,
        ks_distance,
        pass,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct StrongLawRow {
    pub n: usize,
    /// Median over seeds of `|N^{-1} b^H V a|` with `b` orthogonal to `a`.
    pub median_linear: f64,
    /// Median over seeds of `|N^{-1} b^H V^H D V a|` with `b` orthogonal to `a`.
    pub median_quadratic_orthogonal: f64,
    /// `N^{-1} a^H V^H D V a` across seeds; tends to `N^{-1} Tr(D)`.
    pub quadratic: MeanEstimate,
    /// Largest deviation of `N^{-1} ||V a||^2` from 1.
    pub isometry_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StrongLawReport {
    pub rows: Vec<StrongLawRow>,
    pub linear_slope: f64,
    pub quadratic_slope: f64,
    pub trace_limit: f64,
    pub pass: bool,
}

/// Decay of `N^{-1} b^H V a` and convergence of `N^{-1} b^H V^H D V a` to
/// `C N^{-1} Tr(D)`, where `C = lim N^{-1} b^H a`.
pub fn strong_law_check<R: Rng + ?Sized>(
    n_grid: &[usize],
    seeds: usize,
    sigmas: f64,
    rng: &mut R,
) -> Result<StrongLawReport, HaarError> {
    if n_grid.len() < 2 || seeds < 2 {
        return Err(HaarError::Parameter("need two grid points and two seeds".into()));
    }
    let trace_limit = 0.3;
    let mut rows = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let nf = n as f64;
        // Diagonal with mean exactly 0.3.
        let d: Vec<f64> = (0..n)
            .map(|k| trace_limit + 0.2 * (2.0 * std::f64::consts::PI * k as f64 / nf).cos())
            .collect();
        let mut lin = Vec::with_capacity(seeds);
        let mut quad_orth = Vec::with_capacity(seeds);
        let mut quad = Vec::with_capacity(seeds);
        let mut iso: f64 = 0.0;
        for _ in 0..seeds {
            let v = sample_haar_reflectors(n, rng);
            let a = unit_power(complex_normal_vec(rng, n, 1.0));
            let mut b = complex_normal_vec(rng, n, 1.0);
            let proj = linalg::dot(&a, &b) / linalg::norm_sqr(&a);
            linalg::axpy(-proj, &a, &mut b);
            let b = unit_power(b);
            let va = v.apply(&a);
            let dva: ComplexVector = va.iter().zip(&d).map(|(z, di)| z * *di).collect();
            let vdva = v.apply_adjoint(&dva);
            lin.push((linalg::dot(&b, &va) / nf).norm());
            quad_orth.push((linalg::dot(&b, &vdva) / nf).norm());
            quad.push((linalg::dot(&a, &vdva) / nf).re);
            iso = iso.max((linalg::norm_sqr(&va) / nf - 1.0).abs());
        }
        rows.push(StrongLawRow {
            n,
            median_linear: stats::median(&lin),
            median_quadratic_orthogonal: stats::median(&quad_orth),
            quadratic: MeanEstimate::from_samples(&quad),
            isometry_error: iso,
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let linear_slope = stats::log_log_slope(&ns, &rows.iter().map(|r| r.median_linear).collect::<Vec<_>>());
    let quadratic_slope = stats::log_log_slope(
        &ns,
        &rows.iter().map(|r| r.median_quadratic_orthogonal).collect::<Vec<_>>(),
    );
    let last = rows.last().expect("nonempty grid");
    let pass = (linear_slope + 0.5).abs() < 0.2
        && (quadratic_slope + 0.5).abs() < 0.2
        && last.quadratic.within(trace_limit, sigmas)
        && rows.iter().all(|r| r.isometry_error < 1e-10);
    Ok(StrongLawReport {
        rows,
        linear_slope,
        quadratic_slope,
        trace_limit,
        pass,
    })
}

fn unit_power(mut a: ComplexVector) -> ComplexVector {
    let s = (a.len() as f64 / linalg::norm_sqr(&a)).sqrt();
    for z in &mut a {
        *z *= s;
    }
    a
}

/// The data `Q_{t'}, B_{t'}, M_t, H_t` of an EP run at a given step together
/// with the Haar factor that generated them.
#[derive(Clone, Debug)]
pub struct ConditioningSnapshot {
    pub t: usize,
    pub t_prime: usize,
    pub q: ComplexMatrix,
    pub b: ComplexMatrix,
    pub m: ComplexMatrix,
    pub h: ComplexMatrix,
    /// `q_t` when `t' = t`.
    pub q_t: Option<ComplexVector>,
    /// `m_t` when `t' = t + 1`.
    pub m_t: Option<ComplexVector>,
    pub v: ComplexMatrix,
}

impl ConditioningSnapshot {
    pub fn from_history(history: &History, v: ComplexMatrix, t: usize, t_prime: usize) -> Result<Self, HaarError> {
        if !(t_prime == t || t_prime == t + 1) || t_prime == 0 {
            return Err(HaarError::Snapshot(format!("t' = {t_prime} must be t or t + 1 and positive (t = {t})")));
        }
        let n = v.rows();
        if n <= t + t_prime {
            return Err(HaarError::Snapshot(format!("need N > t + t', got N = {n}")));
        }
        let need_q = if t_prime == t { t + 1 } else { t_prime };
        let need_m = if t_prime == t + 1 { t + 1 } else { t };
        if history.q.len() < need_q || history.b.len() < t_prime || history.m.len() < need_m || history.h.len() < t {
            return Err(HaarError::Snapshot(format!("history too short for t = {t}, t' = {t_prime}")));
        }
        let snap = Self {
            t,
            t_prime,
            q: history.q_matrix(t_prime),
            b: history.b_matrix(t_prime),
            m: history.m_matrix(t),
            h: history.h_matrix(t),
            q_t: (t_prime == t).then(|| history.q[t].clone()),
            m_t: (t_prime == t + 1).then(|| history.m[t].clone()),
            v,
        };
        let c = snap.constraint_residual();
        if c > 1e-9 {
            return Err(HaarError::Snapshot(format!("B^H M differs from Q^H H by {c:e}")));
        }
        Ok(snap)
    }

    pub fn n(&self) -> usize {
        self.v.rows()
    }

    /// Relative mismatch of `B^H M = Q^H H`; zero when `t = 0`.
    pub fn constraint_residual(&self) -> f64 {
        if self.t == 0 {
            return 0.0;
        }
        linalg::relative_residual(&self.b.adjoint_matmul(&self.m), &self.q.adjoint_matmul(&self.h))
    }
}

/// Blocks of the conditional mean in the bases `Phi_Q`, `Phi_M`.
#[derive(Clone, Debug)]
pub struct ConditionalMeanFactors {
    pub t: usize,
    pub t_prime: usize,
    /// Built from `Q`, `B`.
    pub v00: ComplexMatrix,
    /// Built from `H`, `M`.
    pub v00_alt: ComplexMatrix,
    pub v01: ComplexMatrix,
    pub v10: ComplexMatrix,
    /// Row form of the lower-right block.
    pub v11_r: ComplexMatrix,
    /// Column form of the lower-right block.
    pub v11_c: ComplexMatrix,
    pub phi_q: ComplexMatrix,
    pub phi_m: ComplexMatrix,
    pub v_bar: ComplexMatrix,
}

fn full_left_basis(a: &ComplexMatrix) -> Result<ComplexMatrix, HaarError> {
    let f = linalg::svd(a)?;
    check_rank(a, f.singular())?;
    Ok(f.left().to_dense())
}

fn full_right_basis(a: &ComplexMatrix) -> Result<ComplexMatrix, HaarError> {
    let f = linalg::svd(a)?;
    check_rank(a, f.singular())?;
    Ok(f.right().to_dense())
}

fn check_rank(a: &ComplexMatrix, s: &[f64]) -> Result<(), HaarError> {
    let (largest, smallest) = (s[0], *s.last().expect("nonempty"));
    if largest == 0.0 || smallest <= RANK_TOL * largest {
        return Err(LinalgError::RankDeficient {
            rows: a.rows(),
            cols: a.cols(),
            smallest,
            threshold: RANK_TOL * largest,
        }
        .into());
    }
    Ok(())
}

fn assemble(v00: &ComplexMatrix, v01: &ComplexMatrix, v10: &ComplexMatrix, v11: &ComplexMatrix) -> ComplexMatrix {
    v00.hcat(v01).vcat(&v10.hcat(v11))
}

pub fn conditional_mean_build(snap: &ConditioningSnapshot) -> Result<ConditionalMeanFactors, HaarError> {
    let (t, tp, n) = (snap.t, snap.t_prime, snap.n());
    let phi_q = full_left_basis(&snap.q)?;
    if t == 0 {
        let q0 = snap.q.column(0);
        let b0 = snap.b.column(0);
        let nq = linalg::norm_sqr(&q0);
        let v_bar = ComplexMatrix::column_matrix(&q0)
            .matmul(&ComplexMatrix::column_matrix(&b0).adjoint())
            .scale(Complex64::new(1.0 / nq, 0.0));
        let v01 = ComplexMatrix::column_matrix(&b0)
            .adjoint()
            .scale(Complex64::new(1.0 / nq.sqrt(), 0.0));
        let empty = ComplexMatrix::zeros(tp, 0);
        return Ok(ConditionalMeanFactors {
            t,
            t_prime: tp,
            v00: empty.clone(),
            v00_alt: empty,
            v01,
            v10: ComplexMatrix::zeros(n - tp, 0),
            v11_r: ComplexMatrix::zeros(n - tp, n),
            v11_c: ComplexMatrix::zeros(n - tp, n),
            phi_q,
            phi_m: ComplexMatrix::identity(n),
            v_bar,
        });
    }
    let phi_m = full_left_basis(&snap.m)?;
    let (pq_par, pq_perp) = (phi_q.leading_columns(tp), phi_q.trailing_columns(tp));
    let (pm_par, pm_perp) = (phi_m.leading_columns(t), phi_m.trailing_columns(t));
    let q_pinv = linalg::pseudo_inverse(&snap.q)?;
    let m_pinv = linalg::pseudo_inverse(&snap.m)?;

    let left = q_pinv.matmul(&pq_par).adjoint();
    let v00 = left.matmul(&snap.b.adjoint_matmul(&pm_par));
    let hm = snap.h.matmul(&m_pinv);
    let v00_alt = pq_par.adjoint_matmul(&hm.matmul(&pm_par));
    let v01 = left.matmul(&snap.b.adjoint_matmul(&pm_perp));
    let v10 = pq_perp.adjoint_matmul(&hm.matmul(&pm_par));

    let v11_r = v10
        .matmul(&linalg::pseudo_inverse(&v01)?.matmul(&v00).adjoint())
        .scale(Complex64::new(-1.0, 0.0));
    let v11_c = v00
        .matmul(&linalg::pseudo_inverse(&v10)?)
        .adjoint()
        .matmul(&v01)
        .scale(Complex64::new(-1.0, 0.0));
    let v_bar = phi_q
        .matmul(&assemble(&v00, &v01, &v10, &v11_r))
        .matmul(&phi_m.adjoint());
    Ok(ConditionalMeanFactors {
        t,
        t_prime: tp,
        v00,
        v00_alt,
        v01,
        v10,
        v11_r,
        v11_c,
        phi_q,
        phi_m,
        v_bar,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityResidual {
    pub name: String,
    pub residual: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditioningReport {
    pub n: usize,
    pub t: usize,
    pub t_prime: usize,
    pub identities: Vec<IdentityResidual>,
    /// `||eps_1|| / sqrt(N)` when `t' = t`.
    pub eps1: Option<f64>,
    /// `||eps_2|| / sqrt(N)` when `t' = t + 1`.
    pub eps2: Option<f64>,
    pub pass: bool,
}

/// `M^+ - M^+ B (B^H P_M^perp B)^{-1} B^H P_M^perp`.
fn gamma_matrix(m: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix, HaarError> {
    let m_pinv = linalg::pseudo_inverse(m)?;
    let p = linalg::proj_perp(m)?;
    let bp = b.adjoint().matmul(&p);
    let inner = linalg::solve(&bp.matmul(b), &bp)?;
    Ok(m_pinv.sub(&m_pinv.matmul(b).matmul(&inner)))
}

/// `Q^+ - Q^+ H (H^H P_Q^perp H)^{-1} H^H P_Q^perp`.
fn delta_matrix(q: &ComplexMatrix, h: &ComplexMatrix) -> Result<ComplexMatrix, HaarError> {
    let q_pinv = linalg::pseudo_inverse(q)?;
    if h.cols() == 0 {
        return Ok(q_pinv);
    }
    let p = linalg::proj_perp(q)?;
    let hp = h.adjoint().matmul(&p);
    let inner = linalg::solve(&hp.matmul(h), &hp)?;
    Ok(q_pinv.sub(&q_pinv.matmul(h).matmul(&inner)))
}

/// `(B_t beta_t + eps_1, eps_1)` for `q_t` given `Q_t, B_t, M_t, H_t`.
fn vq_rhs(
    q: &ComplexMatrix,
    b: &ComplexMatrix,
    m: &ComplexMatrix,
    h: &ComplexMatrix,
    q_t: &[Complex64],
) -> Result<(ComplexVector, ComplexVector), HaarError> {
    let beta = linalg::pseudo_inverse(q)?.matvec(q_t);
    let q_perp = linalg::sub(q_t, &q.matvec(&beta));
    let eps = gamma_matrix(m, b)?.adjoint_matvec(&h.adjoint_matvec(&q_perp));
    Ok((linalg::add(&b.matvec(&beta), &eps), eps))
}

/// `(H_t alpha_t + eps_2, eps_2)` for `m_t` given `Q_{t+1}, B_{t+1}, M_t, H_t`.
fn vm_rhs(
    q: &ComplexMatrix,
    b: &ComplexMatrix,
    m: &ComplexMatrix,
    h: &ComplexMatrix,
    m_t: &[Complex64],
) -> Result<(ComplexVector, ComplexVector), HaarError> {
    let (par, m_perp) = if m.cols() == 0 {
        (vec![C0; m_t.len()], m_t.to_vec())
    } else {
        let alpha = linalg::pseudo_inverse(m)?.matvec(m_t);
        (h.matvec(&alpha), linalg::sub(m_t, &m.matvec(&alpha)))
    };
    let eps = delta_matrix(q, h)?.adjoint_matvec(&b.adjoint_matvec(&m_perp));
    Ok((linalg::add(&par, &eps), eps))
}

fn identity(name: &str, residual: f64) -> IdentityResidual {
    IdentityResidual {
        name: name.to_string(),
        residual,
        pass: residual <= IDENTITY_TOL,
    }
}

/// Checks every exact identity satisfied by the conditional mean.
pub fn conditioning_identity_check(
    snap: &ConditioningSnapshot,
    f: &ConditionalMeanFactors,
) -> Result<ConditioningReport, HaarError> {
    let (t, tp, n) = (snap.t, snap.t_prime, snap.n());
    let sqrt_n = (n as f64).sqrt();
    let mut ids = Vec::new();

    let mut worst: f64 = 0.0;
    for tau in 0..tp {
        let lhs = f.v_bar.adjoint_matvec(&snap.q.column(tau));
        worst = worst.max(linalg::relative_vector_residual(&lhs, &snap.b.column(tau)));
    }
    ids.push(identity("vq-tau", worst));

    if t > 0 {
        ids.push(identity("constraint", snap.constraint_residual()));
        ids.push(identity("v00-two-way", linalg::relative_residual(&f.v00, &f.v00_alt)));
        ids.push(identity("mean-r-vs-mean-c", linalg::relative_residual(&f.v11_r, &f.v11_c)));
    }

    let mut eps1 = None;
    if let (Some(q_t), true) = (&snap.q_t, t > 0) {
        let (rhs, eps) = vq_rhs(&snap.q, &snap.b, &snap.m, &snap.h, q_t)?;
        ids.push(identity("vq", linalg::relative_vector_residual(&f.v_bar.adjoint_matvec(q_t), &rhs)));
        eps1 = Some(linalg::norm_sqr(&eps).sqrt() / sqrt_n);
    }
    let mut eps2 = None;
    if let Some(m_t) = &snap.m_t {
        let (rhs, eps) = vm_rhs(&snap.q, &snap.b, &snap.m, &snap.h, m_t)?;
        ids.push(identity("vm", linalg::relative_vector_residual(&f.v_bar.matvec(m_t), &rhs)));
        eps2 = Some(linalg::norm_sqr(&eps).sqrt() / sqrt_n);
    }

    // PV01
    let (pm_perp, p_m_perp) = if t == 0 {
        (ComplexMatrix::identity(n), ComplexMatrix::identity(n))
    } else {
        (f.phi_m.trailing_columns(t), linalg::proj_perp(&snap.m)?)
    };
    let v01_perp = linalg::proj_perp(&f.v01)?;
    let lhs = pm_perp.matmul(&v01_perp).matmul(&pm_perp.adjoint());
    let rhs = p_m_perp.sub(&linalg::proj_parallel(&p_m_perp.matmul(&snap.b))?);
    ids.push(identity("pv01", linalg::relative_residual(&lhs, &rhs)));

    if t > 0 {
        let pq_perp = f.phi_q.trailing_columns(tp);
        let p_q_perp = linalg::proj_perp(&snap.q)?;
        let v10_perp = linalg::proj_perp(&f.v10)?;
        let lhs = pq_perp.matmul(&v10_perp).matmul(&pq_perp.adjoint());
        let rhs = p_q_perp.sub(&linalg::proj_parallel(&p_q_perp.matmul(&snap.h))?);
        ids.push(identity("pv10", linalg::relative_residual(&lhs, &rhs)));
    }

    Ok(ConditioningReport {
        n,
        t,
        t_prime: tp,
        pass: ids.iter().all(|i| i.pass),
        identities: ids,
        eps1,
        eps2,
    })
}

/// `||eps_1,t|| / sqrt(N)` and `||eps_2,t|| / sqrt(N)` from a run history,
/// without the Haar factor. Needs `t >= 1`.
pub fn epsilon_norms(history: &History, t: usize) -> Result<(f64, f64), HaarError> {
    if t == 0 || history.m.len() <= t || history.q.len() <= t + 1 {
        return Err(HaarError::Snapshot(format!("history too short for t = {t}")));
    }
    let sqrt_n = (history.q[0].len() as f64).sqrt();
    let (m, h) = (history.m_matrix(t), history.h_matrix(t));
    let (_, e1) = vq_rhs(&history.q_matrix(t), &history.b_matrix(t), &m, &h, &history.q[t])?;
    let (_, e2) = vm_rhs(&history.q_matrix(t + 1), &history.b_matrix(t + 1), &m, &h, &history.m[t])?;
    Ok((linalg::norm_sqr(&e1).sqrt() / sqrt_n, linalg::norm_sqr(&e2).sqrt() / sqrt_n))
}

#[derive(Clone, Debug, Serialize)]
pub struct EpsilonDecayRow {
    pub n: usize,
    pub median_eps1: f64,
    pub median_eps2: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpsilonDecayReport {
    pub t: usize,
    pub seeds: usize,
    pub rows: Vec<EpsilonDecayRow>,
    /// Both medians shrink strictly along the size grid.
    pub pass: bool,
}

/// Medians over seeds of the error terms at iteration `t` for increasing
/// system sizes. Needs no access to the Haar factor.
#[allow(clippy::too_many_arguments)]
pub fn epsilon_decay(
    spec: &EnsembleSpec,
    prior: &Prior,
    delta: f64,
    sigma2: f64,
    sizes: &[usize],
    seeds: usize,
    t: usize,
    seed: u64,
) -> Result<EpsilonDecayReport, HaarError> {
    if sizes.len() < 2 || seeds == 0 || t == 0 {
        return Err(HaarError::Parameter("need two sizes, one seed and t >= 1".into()));
    }
    let opts = EngineOptions {
        keep_history: true,
        ..Default::default()
    };
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let m = (delta * n as f64).round() as usize;
        let mut e1 = Vec::with_capacity(seeds);
        let mut e2 = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let mut rng = stream_rng(seed ^ (n as u64).rotate_left(32), s as u64);
            let model = build_measurement(spec, m, n, &mut rng)?;
            let inst = ProblemInstance::generate(model, prior, sigma2, &mut rng)?;
            let rec = engine::run_ep(&inst, prior, t + 1, &opts)?;
            let (a, b) = epsilon_norms(rec.history.as_ref().expect("history requested"), t)?;
            e1.push(a);
            e2.push(b);
        }
        rows.push(EpsilonDecayRow {
            n,
            median_eps1: stats::median(&e1),
            median_eps2: stats::median(&e2),
        });
    }
    let pass = rows
        .windows(2)
        .all(|w| w[1].median_eps1 < w[0].median_eps1 && w[1].median_eps2 < w[0].median_eps2);
    Ok(EpsilonDecayReport { t, seeds, rows, pass })
}

/// Orthonormal bases `L = Phi_Q^perp Phi_V10^perp` and
/// `R = Phi_M^perp Psi_V01^perp` of the unconstrained part.
fn residual_bases(
    snap: &ConditioningSnapshot,
    f: &ConditionalMeanFactors,
) -> Result<(ComplexMatrix, ComplexMatrix), HaarError> {
    let (t, tp) = (snap.t, snap.t_prime);
    let pq_perp = f.phi_q.trailing_columns(tp);
    let left = if t == 0 {
        pq_perp
    } else {
        pq_perp.matmul(&full_left_basis(&f.v10)?.trailing_columns(t))
    };
    let pm_perp = f.phi_m.trailing_columns(t);
    let right = pm_perp.matmul(&full_right_basis(&f.v01)?.trailing_columns(tp));
    Ok((left, right))
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualHaarReport {
    pub t: usize,
    pub t_prime: usize,
    pub resamples: usize,
    /// `||V - (V_bar + L V~ R^H)||_F / sqrt(N)` with the true residual block.
    pub reconstruction_error: f64,
    pub max_unitarity_error: f64,
    pub max_constraint_error: f64,
    pub pass: bool,
}

fn resample(v_bar: &ComplexMatrix, l: &ComplexMatrix, r: &ComplexMatrix, block: &ComplexMatrix) -> ComplexMatrix {
    v_bar.add(&l.matmul(block).matmul(&r.adjoint()))
}

/// Draws `V' = V_bar + L V~ R^H` with fresh Haar `V~` and checks that each
/// draw is unitary and reproduces the conditioning data.
pub fn residual_haar_check<R: Rng + ?Sized>(
    snap: &ConditioningSnapshot,
    f: &ConditionalMeanFactors,
    resamples: usize,
    rng: &mut R,
) -> Result<ResidualHaarReport, HaarError> {
    let n = snap.n();
    let sqrt_n = (n as f64).sqrt();
    let (l, r) = residual_bases(snap, f)?;
    let truth = l.adjoint_matmul(&snap.v.matmul(&r));
    let reconstruction_error = resample(&f.v_bar, &l, &r, &truth).sub(&snap.v).frobenius_norm() / sqrt_n;

    let mut max_unitarity_error: f64 = 0.0;
    let mut max_constraint_error: f64 = 0.0;
    for _ in 0..resamples {
        let vp = resample(&f.v_bar, &l, &r, &sample_haar(l.cols(), rng));
        let u = vp.adjoint_matmul(&vp).sub(&ComplexMatrix::identity(n)).frobenius_norm() / sqrt_n;
        max_unitarity_error = max_unitarity_error.max(u);
        let mut c = linalg::relative_residual(&vp.adjoint_matmul(&snap.q), &snap.b);
        if snap.t > 0 {
            c = c.max(linalg::relative_residual(&vp.matmul(&snap.m), &snap.h));
        }
        max_constraint_error = max_constraint_error.max(c);
    }
    Ok(ResidualHaarReport {
        t: snap.t,
        t_prime: snap.t_prime,
        resamples,
        reconstruction_error,
        max_unitarity_error,
        max_constraint_error,
        pass: reconstruction_error <= 1e-9 && max_unitarity_error <= 1e-8 && max_constraint_error <= 1e-8,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ContinuationReport {
    pub t: usize,
    /// `N^{-1} ||q_{t+1}||^2` of the original run.
    pub original: f64,
    /// The same quantity for runs driven by resampled right factors.
    pub resampled: MeanEstimate,
    pub resampled_sd: f64,
    /// Largest deviation of the shared prefix `q_0..q_t`.
    pub prefix_error: f64,
    pub pass: bool,
}

/// Re-runs EP with right factors drawn from the conditional law given
/// `X_{t,t+1}`. The runs share `q_0, ..., q_t` with the original and differ
/// afterwards; the original `q_{t+1}` error should look like one more draw.
pub fn continuation_check<R: Rng + ?Sized>(
    instance: &ProblemInstance,
    prior: &Prior,
    t: usize,
    resamples: usize,
    sigmas: f64,
    rng: &mut R,
) -> Result<ContinuationReport, HaarError> {
    if resamples < 2 {
        return Err(HaarError::Parameter("need at least two resamples".into()));
    }
    let opts = EngineOptions {
        keep_history: true,
        ..Default::default()
    };
    let steps = t + 1;
    let base = engine::run_ep(instance, prior, steps, &opts)?;
    let history = base.history.as_ref().expect("history requested");
    let v = instance.model.factors.right().to_dense();
    let snap = ConditioningSnapshot::from_history(history, v, t, t + 1)?;
    let f = conditional_mean_build(&snap)?;
    let (l, r) = residual_bases(&snap, &f)?;
    let nf = instance.n() as f64;
    let original = linalg::norm_sqr(&history.q[t + 1]) / nf;

    let mut values = Vec::with_capacity(resamples);
    let mut prefix_error: f64 = 0.0;
    for _ in 0..resamples {
        let vp = resample(&f.v_bar, &l, &r, &sample_haar(l.cols(), rng));
        let model = MeasurementModel {
            factors: instance.model.factors.with_right(Unitary::Dense(vp)),
            ..instance.model.clone()
        };
        let rec = engine::run_ep(&instance.with_model(model)?, prior, steps, &opts)?;
        let h = rec.history.expect("history requested");
        for tau in 0..=t {
            prefix_error = prefix_error.max(linalg::relative_vector_residual(&h.q[tau], &history.q[tau]));
        }
        values.push(linalg::norm_sqr(&h.q[t + 1]) / nf);
    }
    let resampled = MeanEstimate::from_samples(&values);
    let resampled_sd = stats::sample_variance(&values).sqrt();
    let pass = prefix_error <= 1e-8 && (original - resampled.mean).abs() <= sigmas * resampled_sd;
    Ok(ContinuationReport {
        t,
        original,
        resampled,
        resampled_sd,
        prefix_error,
        pass,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GaussianityReport {
    pub t: usize,
    pub coordinates: Vec<usize>,
    pub runs: usize,
    /// Anderson-Darling statistic of the pooled standardized parts.
    pub anderson_darling: f64,
    /// Mean of `|h_t - H_t alpha_t|^2 / nu_t` over the pooled coordinates.
    pub variance_ratio: f64,
    pub pass: bool,
}

/// Pools `h_t - H_t alpha_t = V m_t^perp` on a fixed coordinate subset across
/// independent runs, standardized by `nu_t = N^{-1} ||m_t^perp||^2`, and
/// tests the real and imaginary parts for normality.
pub fn coordinate_gaussianity(
    histories: &[&History],
    t: usize,
    coordinates: &[usize],
) -> Result<GaussianityReport, HaarError> {
    if histories.is_empty() || coordinates.is_empty() {
        return Err(HaarError::Parameter("need runs and coordinates".into()));
    }
    let mut parts = Vec::new();
    let mut ratio_sum = 0.0;
    for hist in histories {
        if hist.m.len() <= t {
            return Err(HaarError::Snapshot(format!("history has no m_{t}")));
        }
        let m_t = &hist.m[t];
        let n = m_t.len();
        let (m_perp, resid) = if t == 0 {
            (m_t.clone(), hist.h[0].clone())
        } else {
            let m = hist.m_matrix(t);
            let alpha = linalg::pseudo_inverse(&m)?.matvec(m_t);
            (linalg::sub(m_t, &m.matvec(&alpha)), linalg::sub(&hist.h[t], &hist.h_matrix(t).matvec(&alpha)))
        };
        let nu = linalg::norm_sqr(&m_perp) / n as f64;
        let s = (nu / 2.0).sqrt();
        for &c in coordinates {
            if c >= n {
                return Err(HaarError::Parameter(format!("coordinate {c} out of range")));
            }
            parts.push(resid[c].re / s);
            parts.push(resid[c].im / s);
            ratio_sum += resid[c].norm_sqr() / nu;
        }
    }
    let anderson_darling = stats::anderson_darling_normal(&parts, 0.0, 1.0);
    let variance_ratio = ratio_sum / (histories.len() * coordinates.len()) as f64;
    Ok(GaussianityReport {
        t,
        coordinates: coordinates.to_vec(),
        runs: histories.len(),
        anderson_darling,
        variance_ratio,
        pass: anderson_darling < stats::AD_CRITICAL_1PCT && (variance_ratio - 1.0).abs() <= 0.1,
    })
}
