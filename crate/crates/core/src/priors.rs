//! Unit-variance signal priors with their scalar MMSE denoisers and the
//! extrinsic decision function.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::ExtrinsicMessage;
use crate::linalg::ComplexVector;
use crate::quadrature::{self, QuadratureError};
use crate::random::complex_normal;
use crate::stats::MeanEstimate;

/// Smallest admissible `1/mmse(v) - 1/v`.
pub const INFORMATION_FLOOR: f64 = 1e-12;

const QUAD_REL_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PriorError {
    #[error("noise variance must be positive and finite, got {0}")]
    Variance(f64),
    #[error("Bernoulli-Gaussian density must lie in (0, 1), got {0}")]
    Density(f64),
    #[error(
        "{prior} denoiser is uninformative at v = {v:e}: mmse = {mmse:e} leaves no extrinsic \
         information"
    )]
    Uninformative { prior: String, v: f64, mmse: f64 },
    #[error("the Gaussian prior is only available for testing")]
    GaussianPrior,
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Zero-mean, unit-variance i.i.d. signal law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Prior {
    /// Zero with probability `1 - p`, otherwise CN(0, 1/p).
    Bg { p: f64 },
    /// Equiprobable `(+-1 +- i) / sqrt(2)`.
    Qpsk {},
    /// CN(0, 1). Its extrinsic denoiser is identically zero.
    GaussianTestOnly {},
}

impl std::fmt::Display for Prior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Prior::Bg { p } => write!(f, "bg(p={p})"),
            Prior::Qpsk {} => write!(f, "qpsk"),
            Prior::GaussianTestOnly {} => write!(f, "gaussian-test-only"),
        }
    }
}

fn check_v(v: f64) -> Result<(), PriorError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(PriorError::Variance(v))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// sech^2 without overflow.
fn sech2(y: f64) -> f64 {
    let e = (-2.0 * y.abs()).exp();
    4.0 * e / ((1.0 + e) * (1.0 + e))
}

const QPSK_AMP: f64 = std::f64::consts::FRAC_1_SQRT_2;

impl Prior {
    pub fn validate(&self) -> Result<(), PriorError> {
        match self {
            Prior::Bg { p } if !(*p > 0.0 && *p < 1.0) => Err(PriorError::Density(*p)),
            _ => Ok(()),
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Prior::GaussianTestOnly {})
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> ComplexVector {
        (0..n)
            .map(|_| match self {
                Prior::Bg { p } => {
                    if rng.random::<f64>() < *p {
                        complex_normal(rng, 1.0 / p)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                }
                Prior::Qpsk {} => {
                    let re = if rng.random::<bool>() { QPSK_AMP } else { -QPSK_AMP };
                    let im = if rng.random::<bool>() { QPSK_AMP } else { -QPSK_AMP };
                    Complex64::new(re, im)
                }
                Prior::GaussianTestOnly {} => complex_normal(rng, 1.0),
            })
            .collect()
    }

    pub fn fourth_moment(&self) -> f64 {
        match self {
            Prior::Bg { p } => 2.0 / p,
            Prior::Qpsk {} => 1.0,
            Prior::GaussianTestOnly {} => 2.0,
        }
    }

    // Posterior probability of the nonzero component and its shrinkage
    // factor, for |r|^2 = s.
    fn bg_responsibility(p: f64, s: f64, v: f64) -> (f64, f64) {
        let c1 = 1.0 / p + v;
        let g = (1.0 / p) / c1;
        let logit = (p / (1.0 - p)).ln() + (v / c1).ln() + s * (1.0 / v - 1.0 / c1);
        (sigmoid(logit), g)
    }

    fn mean_unchecked(&self, r: Complex64, v: f64) -> Complex64 {
        match self {
            Prior::Bg { p } => {
                let (pi, g) = Self::bg_responsibility(*p, r.norm_sqr(), v);
                r * (pi * g)
            }
            Prior::Qpsk {} => {
                let k = 2.0 * QPSK_AMP / v;
                Complex64::new(QPSK_AMP * (k * r.re).tanh(), QPSK_AMP * (k * r.im).tanh())
            }
            Prior::GaussianTestOnly {} => r / (1.0 + v),
        }
    }

    fn variance_unchecked(&self, r: Complex64, v: f64) -> f64 {
        match self {
            Prior::Bg { p } => {
                let s = r.norm_sqr();
                let (pi, g) = Self::bg_responsibility(*p, s, v);
                pi * g * v + pi * (1.0 - pi) * g * g * s
            }
            Prior::Qpsk {} => {
                let k = 2.0 * QPSK_AMP / v;
                0.5 * (sech2(k * r.re) + sech2(k * r.im))
            }
            Prior::GaussianTestOnly {} => v / (1.0 + v),
        }
    }

    /// `E[x | x + z = r]` with `z ~ CN(0, v)`.
    pub fn posterior_mean(&self, r: Complex64, v: f64) -> Result<Complex64, PriorError> {
        self.validate()?;
        check_v(v)?;
        Ok(self.mean_unchecked(r, v))
    }

    /// `E[|x - E[x|r]|^2 | r]`.
    pub fn posterior_variance(&self, r: Complex64, v: f64) -> Result<f64, PriorError> {
        self.validate()?;
        check_v(v)?;
        Ok(self.variance_unchecked(r, v))
    }

    /// Minimum mean-square error of estimating `x` from `x + CN(0, v)`.
    pub fn mmse(&self, v: f64) -> Result<f64, PriorError> {
        self.validate()?;
        check_v(v)?;
        match self {
            Prior::Bg { p } => {
                // |r|^2 is exponential with mean v (zero component) or
                // 1/p + v (active component).
                let comps = [(1.0 - p, v), (*p, 1.0 / p + v)];
                let mut total = 0.0;
                for (w, c) in comps {
                    let f = |u: f64| {
                        let r = Complex64::new((c * u).sqrt(), 0.0);
                        self.variance_unchecked(r, v) * (-u).exp()
                    };
                    total += w * quadrature::integrate(f, &[0.0, 1.0, f64::INFINITY], QUAD_REL_TOL, 0.0)?;
                }
                Ok(total)
            }
            Prior::Qpsk {} => {
                // Two independent real BPSK problems; the normalized log
                // likelihood ratio is N(1/v, 1/v).
                let mu = 1.0 / v;
                let sd = mu.sqrt();
                let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
                let f = |y: f64| {
                    let z = (y - mu) / sd;
                    norm * (-0.5 * z * z).exp() * sech2(y)
                };
                // Resolve both the Gaussian bump and the sech^2 bump at zero,
                // whose widths differ by orders of magnitude at extreme v.
                let mut breaks = vec![-30.0, 0.0, 30.0, mu - 8.0 * sd, mu, mu + 8.0 * sd];
                breaks.sort_by(f64::total_cmp);
                breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
                breaks.insert(0, f64::NEG_INFINITY);
                breaks.push(f64::INFINITY);
                Ok(quadrature::integrate(f, &breaks, QUAD_REL_TOL, 0.0)?)
            }
            Prior::GaussianTestOnly {} => Ok(v / (1.0 + v)),
        }
    }

    /// The decision function `eta(r) = v_out (eta_tilde(r) / mmse - r / v)`
    /// and `v_out = (1/mmse - 1/v)^{-1}`, for a fixed `mmse = mmse(v)`.
    pub fn decision(&self, r: Complex64, v: f64, mmse: f64) -> (Complex64, Complex64) {
        let v_out = 1.0 / (1.0 / mmse - 1.0 / v);
        let post = self.mean_unchecked(r, v);
        (post, (post / mmse - r / v) * v_out)
    }

    /// Module-B update. Returns the extrinsic message and the posterior mean
    /// estimate `eta_tilde(x)`.
    pub fn extrinsic_denoise(
        &self,
        msg: &ExtrinsicMessage,
    ) -> Result<(ExtrinsicMessage, ComplexVector), PriorError> {
        let v = msg.variance;
        let mmse = self.mmse(v)?;
        let info = 1.0 / mmse - 1.0 / v;
        if !(info >= INFORMATION_FLOOR) {
            return Err(PriorError::Uninformative {
                prior: self.to_string(),
                v,
                mmse,
            });
        }
        let v_out = 1.0 / info;
        let mut posterior = Vec::with_capacity(msg.mean.len());
        let mut mean = Vec::with_capacity(msg.mean.len());
        for &r in &msg.mean {
            let post = self.mean_unchecked(r, v);
            posterior.push(post);
            mean.push((post / mmse - r / v) * v_out);
        }
        Ok((
            ExtrinsicMessage {
                mean,
                variance: v_out,
            },
            posterior,
        ))
    }
}

/// Monte Carlo estimates behind the divergence-free property of the
/// decision function: `E[z* eta(x + z)] = 0` and
/// `E[z* eta_tilde(x + z)] = mmse(v)`.
#[derive(Clone, Debug, Serialize)]
pub struct DecisionCheck {
    pub v: f64,
    pub mmse: f64,
    pub eta_re: MeanEstimate,
    pub eta_im: MeanEstimate,
    pub eta_tilde_re: MeanEstimate,
    pub eta_tilde_im: MeanEstimate,
    pub pass: bool,
}

pub fn decision_function_check<R: Rng + ?Sized>(
    prior: &Prior,
    v: f64,
    samples: usize,
    sigmas: f64,
    rng: &mut R,
) -> Result<DecisionCheck, PriorError> {
    let mmse = prior.mmse(v)?;
    let mut acc = [(0.0, 0.0); 4];
    for _ in 0..samples {
        let x = prior.sample(rng, 1)[0];
        let z = complex_normal(rng, v);
        let (post, eta) = prior.decision(x + z, v, mmse);
        let a = z.conj() * eta;
        let b = z.conj() * post;
        for (slot, val) in acc.iter_mut().zip([a.re, a.im, b.re, b.im]) {
            slot.0 += val;
            slot.1 += val * val;
        }
    }
    let est = acc.map(|(s, q)| MeanEstimate::from_moments(s, q, samples));
    let pass = est[0].within(0.0, sigmas)
        && est[1].within(0.0, sigmas)
        && est[2].within(mmse, sigmas)
        && est[3].within(0.0, sigmas);
    Ok(DecisionCheck {
        v,
        mmse,
        eta_re: est[0],
        eta_im: est[1],
        eta_tilde_re: est[2],
        eta_tilde_im: est[3],
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::stream_rng;
    use proptest::prelude::*;

    const BG: Prior = Prior::Bg { p: 0.1 };

    #[test]
    fn gaussian_closed_forms() {
        let g = Prior::GaussianTestOnly {};
        let r = Complex64::new(0.7, -1.2);
        assert_eq!(g.posterior_mean(r, 0.5).unwrap(), r / 1.5);
        assert_eq!(g.mmse(0.25).unwrap(), 0.25 / 1.25);
        let msg = ExtrinsicMessage {
            mean: vec![r, Complex64::new(3.0, 4.0)],
            variance: 0.3,
        };
        let (out, _) = g.extrinsic_denoise(&msg).unwrap();
        assert!(out.mean.iter().all(|z| z.norm() < 1e-12));
        assert!((out.variance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn qpsk_saturates_at_high_snr() {
        let m = Prior::Qpsk {}.posterior_mean(Complex64::new(10.0, 10.0), 0.01).unwrap();
        assert!((m - Complex64::new(QPSK_AMP, QPSK_AMP)).norm() < 1e-6);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(BG.mmse(0.0), Err(PriorError::Variance(_))));
        assert!(matches!(BG.posterior_mean(Complex64::new(1.0, 0.0), -1.0), Err(PriorError::Variance(_))));
        assert!(matches!(Prior::Bg { p: 1.0 }.mmse(1.0), Err(PriorError::Density(_))));
    }

    #[test]
    fn bg_posterior_mean_matches_monte_carlo() {
        // Posterior mean as a ratio of prior averages of x * likelihood.
        let (r, v) = (Complex64::new(0.3, 0.0), 0.5);
        let mut rng = stream_rng(10, 0);
        let n = 10_000_000;
        let (mut num, mut den) = (Complex64::new(0.0, 0.0), 0.0);
        let mut sq = 0.0;
        for _ in 0..n {
            let x = BG.sample(&mut rng, 1)[0];
            let l = (-(r - x).norm_sqr() / v).exp();
            num += x * l;
            den += l;
            sq += (x.re * l) * (x.re * l);
        }
        let est = num.re / den;
        // Delta-method standard error of the ratio, dominated by numerator noise.
        let nf = n as f64;
        let se = ((sq / nf - (num.re / nf).powi(2)) / nf).sqrt() / (den / nf);
        let exact = BG.posterior_mean(r, v).unwrap();
        assert!(exact.im == 0.0);
        assert!((est - exact.re).abs() < 3.0 * se, "{est} vs {} (se {se})", exact.re);
    }

    #[test]
    fn mmse_limits() {
        for prior in [BG, Prior::Qpsk {}] {
            assert!(prior.mmse(1e-8).unwrap() < 1e-6);
            assert!((prior.mmse(1e8).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mmse_below_gaussian_bound() {
        for prior in [BG, Prior::Qpsk {}] {
            for v in [0.01, 0.1, 1.0, 10.0] {
                let m = prior.mmse(v).unwrap();
                assert!(m < v / (1.0 + v), "{prior} at {v}: {m}");
            }
        }
    }

    #[test]
    fn qpsk_mmse_deep_tail_is_positive() {
        let m = Prior::Qpsk {}.mmse(0.01).unwrap();
        assert!(m > 0.0 && m < 1e-15, "{m}");
    }

    #[test]
    fn uninformative_message_returns_prior_variance() {
        let msg = ExtrinsicMessage {
            mean: vec![Complex64::new(0.5, 0.5)],
            variance: 1e6,
        };
        let (out, _) = BG.extrinsic_denoise(&msg).unwrap();
        assert!((out.variance - 1.0).abs() < 1e-3);
    }

    #[test]
    fn divergence_matches_posterior_variance() {
        // d Re(eta)/d Re(r) + d Im(eta)/d Im(r) = 2 Var / v
        let h = 1e-6;
        for prior in [BG, Prior::Qpsk {}] {
            for &(r, v) in &[(Complex64::new(0.3, -0.2), 0.5), (Complex64::new(1.1, 0.4), 0.1)] {
                let f = |z| prior.posterior_mean(z, v).unwrap();
                let dre = (f(r + h) - f(r - h)).re / (2.0 * h);
                let dim = (f(r + Complex64::new(0.0, h)) - f(r - Complex64::new(0.0, h))).im / (2.0 * h);
                let var = prior.posterior_variance(r, v).unwrap();
                assert!((dre + dim - 2.0 * var / v).abs() < 1e-5, "{prior} {r} {v}");
            }
        }
    }

    #[test]
    fn decision_function_is_orthogonal_to_noise() {
        let mut rng = stream_rng(11, 0);
        let c = decision_function_check(&BG, 0.2, 1_000_000, 5.0, &mut rng).unwrap();
        assert!(c.pass, "{c:?}");
    }

    proptest! {
        #[test]
        fn mmse_is_monotone(a in 1e-3f64..50.0, b in 1e-3f64..50.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            for prior in [BG, Prior::Qpsk {}] {
                prop_assert!(prior.mmse(lo).unwrap() <= prior.mmse(hi).unwrap() + 1e-12);
            }
        }

        #[test]
        fn posterior_variance_bounded(re in -5.0f64..5.0, im in -5.0f64..5.0, v in 1e-3f64..10.0) {
            let r = Complex64::new(re, im);
            for prior in [BG, Prior::Qpsk {}] {
                let var = prior.posterior_variance(r, v).unwrap();
                prop_assert!(var >= 0.0);
                if matches!(prior, Prior::Qpsk {}) {
                    prop_assert!(prior.posterior_mean(r, v).unwrap().norm() <= 1.0 + 1e-12);
                }
            }
        }
    }
}
