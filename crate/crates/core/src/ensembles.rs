//! Measurement ensembles with right-unitarily invariant Gram matrices, their
//! eigenvalue laws, and Haar unitary sampling.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    self, ComplexMatrix, ComplexVector, HouseholderProduct, LinalgError, SvdFactors, Unitary,
};
use crate::random::{complex_normal, complex_normal_matrix, complex_normal_vec};

/// Number of quantile nodes used to atomize smooth eigenvalue laws.
pub const DEFAULT_ATOMS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("need 1 <= m <= n, got m = {m}, n = {n}")]
    Dimensions { m: usize, n: usize },
    #[error("invalid ensemble parameter: {0}")]
    Parameter(String),
    #[error("invalid spectral density: {0}")]
    Density(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Eigenvalue law as weighted atoms, sorted by eigenvalue with duplicates
/// merged.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDensity {
    atoms: Vec<(f64, f64)>,
}

impl SpectralDensity {
    pub fn new(mut atoms: Vec<(f64, f64)>) -> Result<Self, EnsembleError> {
        if atoms.is_empty() {
            return Err(EnsembleError::Density("no atoms".into()));
        }
        for &(l, w) in &atoms {
            if !l.is_finite() || l < 0.0 {
                return Err(EnsembleError::Density(format!("eigenvalue {l} is not >= 0")));
            }
            if !w.is_finite() || w <= 0.0 {
                return Err(EnsembleError::Density(format!("weight {w} is not > 0")));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(EnsembleError::Density(format!("weights sum to {total}")));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (l, w) in atoms {
            match merged.last_mut() {
                Some(last) if last.0 == l => last.1 += w,
                _ => merged.push((l, w)),
            }
        }
        let total: f64 = merged.iter().map(|a| a.1).sum();
        for a in &mut merged {
            a.1 /= total;
        }
        Ok(Self { atoms: merged })
    }

    pub fn point_mass(lambda: f64) -> Result<Self, EnsembleError> {
        Self::new(vec![(lambda, 1.0)])
    }

    /// Marchenko-Pastur law of `A A^H` for an `m x n` matrix with i.i.d.
    /// CN(0, 1/n) entries and `delta = m / n <= 1`, atomized at `nodes`
    /// equal-probability quantiles.
    pub fn marchenko_pastur(delta: f64, nodes: usize) -> Result<Self, EnsembleError> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(EnsembleError::Parameter(format!("delta = {delta} not in (0, 1]")));
        }
        if nodes == 0 {
            return Err(EnsembleError::Parameter("need at least one node".into()));
        }
        let mp = MarchenkoPastur::new(delta);
        let w = 1.0 / nodes as f64;
        let atoms = (0..nodes)
            .map(|k| (mp.quantile((k as f64 + 0.5) * w), w))
            .collect();
        Self::new(atoms)
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// `sum w * lambda^k`.
    pub fn moment(&self, k: i32) -> f64 {
        self.atoms.iter().map(|&(l, w)| w * l.powi(k)).sum()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.atoms[0].0
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .take_while(|a| a.0 <= x)
            .map(|a| a.1)
            .sum::<f64>()
            .min(1.0)
    }

    /// Kolmogorov distance to a continuous law given by its CDF.
    pub fn kolmogorov_distance(&self, cdf: impl Fn(f64) -> f64) -> f64 {
        let mut below = 0.0;
        let mut d: f64 = 0.0;
        for &(l, w) in &self.atoms {
            let f = cdf(l);
            d = d.max((below - f).abs());
            below += w;
            d = d.max((below - f).abs());
        }
        d
    }
}

/// Closed-form Marchenko-Pastur distribution with unit mean and ratio
/// `delta <= 1`, supported on `[(1 - sqrt(delta))^2, (1 + sqrt(delta))^2]`.
#[derive(Clone, Copy, Debug)]
pub struct MarchenkoPastur {
    delta: f64,
    center: f64,
    radius: f64,
}

impl MarchenkoPastur {
    pub fn new(delta: f64) -> Self {
        Self {
            delta,
            center: 1.0 + delta,
            radius: 2.0 * delta.sqrt(),
        }
    }

    pub fn support(&self) -> (f64, f64) {
        (self.center - self.radius, self.center + self.radius)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let (a, b) = self.support();
        if x <= a || x >= b {
            return 0.0;
        }
        ((b - x) * (x - a)).sqrt() / (2.0 * std::f64::consts::PI * self.delta * x)
    }

    // With x = center - radius * cos(theta) the density becomes
    // (2/pi) sin^2 / (center - radius cos), which integrates in closed form.
    fn cdf_theta(&self, theta: f64) -> f64 {
        let (m, r, d) = (self.center, self.radius, self.delta);
        let mut f = theta.sin() / r + m * theta / (r * r);
        if d < 1.0 {
            let c = -(1.0 - d) * (1.0 - d) / (4.0 * d);
            let k = (1.0 + d.sqrt()) / (1.0 - d.sqrt());
            let half = 0.5 * theta;
            f += c * 2.0 / (1.0 - d) * (k * half.sin()).atan2(half.cos());
        }
        (2.0 / std::f64::consts::PI * f).clamp(0.0, 1.0)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (a, b) = self.support();
        if x <= a {
            return 0.0;
        }
        if x >= b {
            return 1.0;
        }
        let c = ((self.center - x) / self.radius).clamp(-1.0, 1.0);
        self.cdf_theta(c.acos())
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, std::f64::consts::PI);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf_theta(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        self.center - self.radius * (0.5 * (lo + hi)).cos()
    }
}

/// Generative law of the measurement matrix. All kinds are normalized so
/// that `m^{-1} sum sigma_i^2 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnsembleSpec {
    IidGaussian {},
    RowOrthogonalHaar {},
    GeometricSpectrumHaar { kappa: f64 },
    CustomSpectrumHaar { singular: Vec<f64> },
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        match self {
            EnsembleSpec::GeometricSpectrumHaar { kappa } if !(kappa.is_finite() && *kappa >= 1.0) => {
                Err(EnsembleError::Parameter(format!("condition number {kappa} must be >= 1")))
            }
            EnsembleSpec::CustomSpectrumHaar { singular } => {
                if singular.is_empty() {
                    return Err(EnsembleError::Parameter("empty singular value list".into()));
                }
                if singular.iter().any(|s| !s.is_finite() || *s < 0.0) {
                    return Err(EnsembleError::Parameter(
                        "singular values must be finite and nonnegative".into(),
                    ));
                }
                if singular.iter().all(|s| *s == 0.0) {
                    return Err(EnsembleError::Parameter("all singular values are zero".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Deterministic singular values (descending) for the Haar-based kinds;
    /// `None` for the Gaussian ensemble, whose spectrum is random.
    pub fn singular_values(&self, m: usize) -> Result<Option<Vec<f64>>, EnsembleError> {
        self.validate()?;
        let squares: Vec<f64> = match self {
            EnsembleSpec::IidGaussian {} => return Ok(None),
            EnsembleSpec::RowOrthogonalHaar {} => vec![1.0; m],
            EnsembleSpec::GeometricSpectrumHaar { kappa } => {
                if m == 1 {
                    vec![1.0]
                } else {
                    (0..m)
                        .map(|i| kappa.powf(-(i as f64) / (m - 1) as f64))
                        .collect()
                }
            }
            EnsembleSpec::CustomSpectrumHaar { singular } => {
                let mut s: Vec<f64> = (0..m)
                    .map(|i| singular[i * singular.len() / m].powi(2))
                    .collect();
                s.sort_by(|a, b| b.total_cmp(a));
                s
            }
        };
        Ok(Some(normalize_squares(squares)))
    }

    /// Asymptotic eigenvalue law of `A A^H` for `m x n` matrices.
    pub fn target_density(&self, m: usize, n: usize) -> Result<SpectralDensity, EnsembleError> {
        check_dims(m, n)?;
        match self.singular_values(m)? {
            None => SpectralDensity::marchenko_pastur(m as f64 / n as f64, DEFAULT_ATOMS),
            Some(s) => density_from_singular(&s),
        }
    }
}

fn normalize_squares(squares: Vec<f64>) -> Vec<f64> {
    let mean = squares.iter().sum::<f64>() / squares.len() as f64;
    squares.iter().map(|s| (s / mean).sqrt()).collect()
}

fn check_dims(m: usize, n: usize) -> Result<(), EnsembleError> {
    if m == 0 || m > n {
        return Err(EnsembleError::Dimensions { m, n });
    }
    Ok(())
}

fn density_from_singular(singular: &[f64]) -> Result<SpectralDensity, EnsembleError> {
    let w = 1.0 / singular.len() as f64;
    let mut atoms: Vec<(f64, f64)> = singular.iter().map(|s| (s * s, w)).collect();
    // Equal weights may not add to exactly one in floating point.
    let total: f64 = atoms.iter().map(|a| a.1).sum();
    for a in &mut atoms {
        a.1 /= total;
    }
    SpectralDensity::new(atoms)
}

/// Empirical law `{(sigma_i^2, 1/m)}` of the first `m` singular values.
pub fn eigen_density(factors: &SvdFactors, m: usize) -> Result<SpectralDensity, EnsembleError> {
    let s = factors.singular();
    if m == 0 || m > s.len() {
        return Err(EnsembleError::Dimensions { m, n: s.len() });
    }
    density_from_singular(&s[..m])
}

/// `A = U (Sigma, 0) V^H` together with the law of its eigenvalues.
#[derive(Clone, Debug)]
pub struct MeasurementModel {
    pub factors: SvdFactors,
    pub density: SpectralDensity,
    pub m: usize,
    pub n: usize,
}

impl MeasurementModel {
    pub fn delta(&self) -> f64 {
        self.m as f64 / self.n as f64
    }

    /// Same left factor and spectrum with a fresh Haar right factor.
    pub fn resample_right<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let right = Unitary::Householder(sample_haar_reflectors(self.n, rng));
        Self {
            factors: self.factors.with_right(right),
            density: self.density.clone(),
            m: self.m,
            n: self.n,
        }
    }

    pub fn dense(&self) -> ComplexMatrix {
        self.factors.reconstruct()
    }
}

/// Draws an `m x n` measurement matrix. The left factor and spectrum are
/// drawn before the right factor, which is Haar and independent of both.
pub fn build_measurement<R: Rng + ?Sized>(
    spec: &EnsembleSpec,
    m: usize,
    n: usize,
    rng: &mut R,
) -> Result<MeasurementModel, EnsembleError> {
    check_dims(m, n)?;
    let (left, singular) = match spec.singular_values(m)? {
        Some(s) => (Unitary::Householder(sample_haar_reflectors(m, rng)), s),
        None => {
            let g = complex_normal_matrix(rng, m, n, 1.0 / n as f64);
            let f = linalg::svd(&g)?;
            let s = normalize_squares(f.singular().iter().map(|s| s * s).collect());
            (f.left().clone(), s)
        }
    };
    // For a Gaussian matrix the right singular basis is Haar and independent
    // of the rest, so a fresh draw has the same joint law.
    let right = Unitary::Householder(sample_haar_reflectors(n, rng));
    let factors = SvdFactors::new(left, singular, right)?;
    let density = eigen_density(&factors, m)?;
    Ok(MeasurementModel {
        factors,
        density,
        m,
        n,
    })
}

/// Haar unitary of size `n` as a product of Householder reflectors, obtained
/// by running Householder QR on a Ginibre matrix one column at a time and
/// absorbing the phases of the diagonal of `R`.
pub fn sample_haar_reflectors<R: Rng + ?Sized>(n: usize, rng: &mut R) -> HouseholderProduct {
    let mut vectors = Vec::with_capacity(n.saturating_sub(1));
    let mut phases = Vec::with_capacity(n);
    for k in 0..n.saturating_sub(1) {
        let mut x = complex_normal_vec(rng, n - k, 1.0);
        let nx = linalg::norm_sqr(&x).sqrt();
        let e = if x[0] == Complex64::new(0.0, 0.0) {
            Complex64::new(1.0, 0.0)
        } else {
            x[0] / x[0].norm()
        };
        x[0] += e * nx;
        let nu = linalg::norm_sqr(&x).sqrt();
        for z in &mut x {
            *z /= nu;
        }
        vectors.push(x);
        phases.push(-e);
    }
    if n > 0 {
        let z = complex_normal(rng, 1.0);
        phases.push(z / z.norm());
    }
    HouseholderProduct::new(n, vectors, phases)
}

pub fn sample_haar<R: Rng + ?Sized>(n: usize, rng: &mut R) -> ComplexMatrix {
    sample_haar_reflectors(n, rng).to_dense()
}

/// Haar unitary from a dense QR of a Ginibre matrix, with column `j` of `Q`
/// multiplied by `R_jj / |R_jj|`.
pub fn sample_haar_qr<R: Rng + ?Sized>(n: usize, rng: &mut R) -> ComplexMatrix {
    let g = complex_normal_matrix(rng, n, n, 1.0);
    let qr = g.to_faer().qr();
    let q = qr.compute_Q();
    let r = qr.R();
    let phases: ComplexVector = (0..n)
        .map(|j| {
            let d = r[(j, j)];
            if d.norm() == 0.0 {
                Complex64::new(1.0, 0.0)
            } else {
                d / d.norm()
            }
        })
        .collect();
    ComplexMatrix::from_fn(n, n, |i, j| q[(i, j)] * phases[j])
}
