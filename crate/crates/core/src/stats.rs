//! Small statistics toolkit for the Monte Carlo checks.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn mean(xs: &[f64]) -> f64 {
    compensated_sum(xs.iter().copied()) / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two samples.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    compensated_sum(xs.iter().map(|x| (x - mu) * (x - mu))) / (xs.len() - 1) as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            stderr: (sample_variance(xs) / xs.len() as f64).sqrt(),
            samples: xs.len(),
        }
    }

    /// Running accumulation without storing samples.
    pub fn from_moments(sum: f64, sum_sq: f64, samples: usize) -> Self {
        let n = samples as f64;
        let mean = sum / n;
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        Self {
            mean,
            stderr: (var / n).sqrt(),
            samples,
        }
    }

    /// Distance to `target` in standard errors.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.mean - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.stderr
        }
    }

    pub fn within(&self, target: f64, sigmas: f64) -> bool {
        self.z_score(target) <= sigmas
    }
}

/// Anderson-Darling statistic against a fully specified normal law.
pub fn anderson_darling_normal(xs: &[f64], mu: f64, sigma: f64) -> f64 {
    let normal = Normal::new(mu, sigma).expect("valid normal parameters");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let nf = n as f64;
    let mut s = 0.0;
    for i in 0..n {
        let f_lo = normal.cdf(v[i]).clamp(1e-300, 1.0 - 1e-16);
        let f_hi = normal.cdf(v[n - 1 - i]).clamp(1e-300, 1.0 - 1e-16);
        s += (2.0 * i as f64 + 1.0) * (f_lo.ln() + (1.0 - f_hi).ln());
    }
    -nf - s / nf
}

/// 1% critical value of the Anderson-Darling statistic with known
/// parameters.
pub const AD_CRITICAL_1PCT: f64 = 3.857;

/// Kolmogorov-Smirnov distance to a normal law.
pub fn ks_normal(xs: &[f64], mu: f64, sigma: f64) -> f64 {
    let normal = Normal::new(mu, sigma).expect("valid normal parameters");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::stream_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    #[test]
    fn estimates_from_moments_match_samples() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let a = MeanEstimate::from_samples(&xs);
        let b = MeanEstimate::from_moments(14.0, 70.0, 4);
        assert!((a.mean - b.mean).abs() < 1e-15);
        assert!((a.stderr - b.stderr).abs() < 1e-12);
    }

    #[test]
    fn normality_tests_accept_normal_and_reject_uniform() {
        let mut rng = stream_rng(1, 0);
        let xs: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
        assert!(anderson_darling_normal(&xs, 0.0, 1.0) < AD_CRITICAL_1PCT);
        assert!(ks_normal(&xs, 0.0, 1.0) < 0.04);
        let us: Vec<f64> = (0..2000).map(|_| rng.random::<f64>() * 3.4 - 1.7).collect();
        assert!(anderson_darling_normal(&us, 0.0, 1.0) > AD_CRITICAL_1PCT);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [64.0, 128.0, 256.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert!((log_log_slope(&x, &y) + 0.5).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }
}
