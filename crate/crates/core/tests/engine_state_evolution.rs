use epse_core::engine::{self, gamma_finite, EngineOptions, GammaMode, ProblemInstance};
use epse_core::ensembles::{build_measurement, eigen_density};
use epse_core::haar_analysis::coordinate_gaussianity;
use epse_core::linalg::{self, inverse, ComplexMatrix};
use epse_core::random::{complex_normal, stream_rng};
use epse_core::state_evolution::{find_fixed_points, find_threshold, se_run, SeError};
use epse_core::stats::{self, MeanEstimate};
use epse_core::{EnsembleSpec, Prior, SpectralDensity};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;

const BG: Prior = Prior::Bg { p: 0.1 };

fn instance(spec: &EnsembleSpec, n: usize, delta: f64, sigma2: f64, prior: &Prior, seed: u64) -> ProblemInstance {
    let mut rng = stream_rng(seed, 0);
    let m = (delta * n as f64).round() as usize;
    let model = build_measurement(spec, m, n, &mut rng).unwrap();
    ProblemInstance::generate(model, prior, sigma2, &mut rng).unwrap()
}

#[test]
fn asymptotic_gamma_engine_reproduces_se_variances() {
    // With gamma taken from the same density, the engine's variances follow
    // the SE recursion exactly.
    for (spec, delta) in [
        (EnsembleSpec::RowOrthogonalHaar {}, 0.5),
        (EnsembleSpec::GeometricSpectrumHaar { kappa: 10.0 }, 0.6),
        (EnsembleSpec::IidGaussian {}, 0.5),
    ] {
        let inst = instance(&spec, 256, delta, 0.01, &BG, 1);
        let m = inst.model.m;
        let density = spec.target_density(m, 256).unwrap();
        let opts = EngineOptions {
            gamma: GammaMode::Asymptotic {
                density: density.clone(),
                delta,
            },
            ..Default::default()
        };
        let rec = engine::run_ep(&inst, &BG, 8, &opts).unwrap();
        let se = se_run(&density, delta, 0.01, &BG, 8).unwrap();
        for it in &rec.iterations {
            let rel_ab = (it.v_ab - se.mse_ab[it.t]).abs() / se.mse_ab[it.t];
            let rel_ba = (it.v_ba - se.mse_ba[it.t]).abs() / se.mse_ba[it.t];
            assert!(rel_ab < 1e-12 && rel_ba < 1e-12, "{spec:?} t={}: {rel_ab:e} {rel_ba:e}", it.t);
        }
    }
}

#[test]
fn gamma_finite_matches_dense_gram_trace() {
    // N / Tr(A^H (sigma2 I + v A A^H)^{-1} A) from the dense matrix.
    let inst = instance(&EnsembleSpec::GeometricSpectrumHaar { kappa: 5.0 }, 48, 0.5, 0.05, &BG, 2);
    let a = inst.model.dense();
    let m = a.rows();
    for v in [0.01, 0.3, 2.0] {
        let gram = a.matmul(&a.adjoint()).scale(Complex64::new(v, 0.0));
        let k = ComplexMatrix::identity(m).scale(Complex64::new(0.05, 0.0)).add(&gram);
        let tr = a.adjoint().matmul(&inverse(&k).unwrap()).matmul(&a).trace().re;
        let dense = 48.0 / tr;
        let fast = gamma_finite(&inst.model.factors, 0.05, v, 48).unwrap();
        assert!((dense - fast).abs() / dense < 1e-10, "{dense} {fast}");
    }
    // Same atoms through the asymptotic formula.
    let atoms = eigen_density(&inst.model.factors, m).unwrap();
    let g = epse_core::state_evolution::gamma_asymptotic(&atoms, 0.5, 0.05, 0.3).unwrap();
    assert!((g - gamma_finite(&inst.model.factors, 0.05, 0.3, 48).unwrap()).abs() / g < 1e-12);
}

#[test]
fn posterior_error_below_incoming_variance() {
    let t_max = 8;
    let mut post = vec![0.0; t_max];
    let mut incoming = vec![0.0; t_max];
    for seed in 0..20 {
        let inst = instance(&EnsembleSpec::RowOrthogonalHaar {}, 256, 0.5, 0.01, &BG, 100 + seed);
        let rec = engine::run_ep(&inst, &BG, t_max, &EngineOptions::default()).unwrap();
        for it in &rec.iterations {
            assert!(it.v_ab > 0.0 && it.v_ba > 0.0);
            // Denoising never makes the realized error worse.
            assert!(it.mse_post_emp <= it.mse_a_emp, "seed {seed} t {}", it.t);
            post[it.t] += it.mse_post_emp / 20.0;
            incoming[it.t] += it.v_ab / 20.0;
        }
    }
    for t in 0..t_max {
        assert!(post[t] <= incoming[t], "t {t}: {} > {}", post[t], incoming[t]);
    }
}

#[test]
fn orthogonality_decays_with_size() {
    let sizes = [128usize, 256, 512, 1024];
    let mut medians = Vec::new();
    for &n in &sizes {
        let mut vals = Vec::new();
        for seed in 0..20 {
            let inst = instance(&EnsembleSpec::RowOrthogonalHaar {}, n, 0.5, 0.01, &BG, 1000 * n as u64 + seed);
            let rec = engine::run_ep(&inst, &BG, 3, &EngineOptions::default()).unwrap();
            // Every recorded pair at t = 1, normalized by the pair's error powers.
            let it = &rec.iterations[1];
            for (s, c) in rec.cross[1].iter().enumerate() {
                let q_pow = rec.iterations.get(s).map_or(rec.final_mse_b.unwrap(), |r| r.mse_b_emp);
                vals.push(c.norm() / (it.mse_a_emp * q_pow).sqrt());
            }
        }
        medians.push(stats::median(&vals));
    }
    let ns: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let slope = stats::log_log_slope(&ns, &medians);
    assert!((slope + 0.5).abs() < 0.2, "slope {slope}, medians {medians:?}");
}

#[test]
fn coordinate_gaussianity_across_seeds() {
    let mut hists = Vec::new();
    let opts = EngineOptions {
        keep_history: true,
        ..Default::default()
    };
    for seed in 0..400 {
        let inst = instance(&EnsembleSpec::RowOrthogonalHaar {}, 128, 0.5, 0.01, &BG, 5000 + seed);
        hists.push(engine::run_ep(&inst, &BG, 3, &opts).unwrap().history.unwrap());
    }
    let refs: Vec<_> = hists.iter().collect();
    for t in 0..3 {
        let r = coordinate_gaussianity(&refs, t, &[0, 1, 2, 3]).unwrap();
        assert!(r.pass, "t = {t}: {r:?}");
    }
}

fn row_orthogonal_family(n: usize) -> impl Fn(f64) -> Result<SpectralDensity, SeError> {
    move |d: f64| Ok(EnsembleSpec::RowOrthogonalHaar {}.target_density(((d * n as f64).round() as usize).max(1), n)?)
}

#[test]
fn fixed_point_count_changes_at_threshold() {
    let grid = epse_core::state_evolution::default_init_grid(25);
    let family = row_orthogonal_family(1000);
    let sigma2 = 1e-4;
    let th = find_threshold(&family, sigma2, &BG, (0.15, 0.3), &grid, 1e-3)
        .unwrap()
        .expect("count changes on the bracket");
    let count = |d: f64| find_fixed_points(&family(d).unwrap(), d, sigma2, &BG, &grid).unwrap().fixed_points.len();
    assert_eq!(count(th + 0.01), 1, "threshold {th}");
    assert!(count(th - 0.01) >= 2, "threshold {th}");
    // No measurements left: the fixed point sits near the prior variance.
    let low = find_fixed_points(&family(0.002).unwrap(), 0.002, sigma2, &BG, &grid).unwrap();
    assert!(low.fixed_points.iter().all(|p| p.mse_ba > 0.9));
}

#[test]
fn bg_posterior_mean_against_monte_carlo() {
    // E[x | x + z = r] by self-normalized weighting of prior draws.
    let (r, v) = (Complex64::new(0.3, 0.0), 0.5);
    let mut rng = stream_rng(77, 0);
    let xs = BG.sample(&mut rng, 10_000_000);
    let w: Vec<f64> = xs.iter().map(|x| (-(r - x).norm_sqr() / v).exp()).collect();
    let total: f64 = w.iter().sum();
    let mean: Complex64 = xs.iter().zip(&w).map(|(x, wi)| x * *wi).sum::<Complex64>() / total;
    // Delta-method standard error of a ratio estimator.
    let var: f64 = xs.iter().zip(&w).map(|(x, wi)| (wi / total).powi(2) * (x - mean).norm_sqr()).sum();
    let exact = BG.posterior_mean(r, v).unwrap();
    assert!((exact - mean).norm() <= 3.0 * var.sqrt(), "{exact} vs {mean} ± {}", var.sqrt());
}

#[test]
fn qpsk_mmse_against_monte_carlo() {
    let v = 0.5;
    let mut rng = stream_rng(78, 0);
    let samples = 10_000_000;
    let xs = Prior::Qpsk {}.sample(&mut rng, samples);
    let (mut s, mut q) = (0.0, 0.0);
    for x in xs {
        let y = x + complex_normal(&mut rng, v);
        // Independent BPSK posterior means per component.
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let est = Complex64::new(a * (2.0 * a * y.re / v).tanh(), a * (2.0 * a * y.im / v).tanh());
        let e = (x - est).norm_sqr();
        s += e;
        q += e * e;
    }
    let mc = MeanEstimate::from_moments(s, q, samples);
    let quad = Prior::Qpsk {}.mmse(v).unwrap();
    assert!(mc.within(quad, 3.0), "{quad} vs {mc:?}");
}

#[test]
fn decision_function_orthogonal_at_v02() {
    let v = 0.2;
    let mmse = BG.mmse(v).unwrap();
    let mut rng = stream_rng(79, 0);
    let xs = BG.sample(&mut rng, 1_000_000);
    let vals: Vec<Complex64> = xs
        .into_iter()
        .map(|x| {
            let z = complex_normal(&mut rng, v);
            z.conj() * BG.decision(x + z, v, mmse).1
        })
        .collect();
    let re = MeanEstimate::from_samples(&vals.iter().map(|c| c.re).collect::<Vec<_>>());
    let im = MeanEstimate::from_samples(&vals.iter().map(|c| c.im).collect::<Vec<_>>());
    assert!(re.within(0.0, 5.0) && im.within(0.0, 5.0), "{re:?} {im:?}");
}

#[test]
fn zero_residual_leaves_mean_unchanged() {
    let inst = instance(&EnsembleSpec::RowOrthogonalHaar {}, 64, 0.5, 0.01, &BG, 3);
    let mut rng = stream_rng(3, 1);
    let mean: Vec<Complex64> = (0..64).map(|_| complex_normal(&mut rng, 1.0)).collect();
    let y = inst.model.factors.apply(&mean);
    let zero_noise = vec![Complex64::new(0.0, 0.0); y.len()];
    let inst = ProblemInstance::new(inst.model.clone(), mean.clone(), zero_noise, 0.01).unwrap();
    assert!(linalg::relative_vector_residual(&inst.y, &y) < 1e-14);
    let msg = epse_core::ExtrinsicMessage::new(mean.clone(), 0.4).unwrap();
    let (out, _) = engine::module_a_update(&msg, &inst, &GammaMode::Finite).unwrap();
    assert!(linalg::relative_vector_residual(&out.mean, &mean) < 1e-13);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn extrinsic_variances_stay_positive(seed in 0u64..10_000, delta in 0.3f64..1.0, log_s2 in -3.0f64..0.0, qpsk in any::<bool>()) {
        let prior = if qpsk { Prior::Qpsk {} } else { BG };
        let inst = instance(&EnsembleSpec::RowOrthogonalHaar {}, 64, delta, 10f64.powf(log_s2), &prior, seed);
        let rec = engine::run_ep(&inst, &prior, 6, &EngineOptions::default()).unwrap();
        for it in &rec.iterations {
            prop_assert!(it.v_ab > 0.0 && it.v_ba > 0.0 && it.gamma > it.v_ba);
        }
    }

    #[test]
    fn se_posterior_never_exceeds_extrinsic(delta in 0.2f64..1.0, log_s2 in -4.0f64..1.0) {
        let density = EnsembleSpec::RowOrthogonalHaar {}.target_density(((delta * 100.0).round() as usize).max(1), 100).unwrap();
        let se = se_run(&density, delta, 10f64.powf(log_s2), &BG, 10).unwrap();
        for t in 0..10 {
            prop_assert!(se.mse_post[t] < se.mse_ab[t]);
            prop_assert!(se.mse_ba[t + 1] > 0.0);
        }
    }

    #[test]
    fn random_points_give_finite_decisions(re in -20.0f64..20.0, im in -20.0f64..20.0, log_v in -3.0f64..2.0) {
        let v = 10f64.powf(log_v);
        for prior in [BG, Prior::Qpsk {}] {
            let m = prior.mmse(v).unwrap();
            let (post, eta) = prior.decision(Complex64::new(re, im), v, m);
            prop_assert!(post.is_finite() && eta.is_finite());
        }
    }
}

#[test]
fn stream_draws_are_independent_of_order() {
    let mut a = stream_rng(5, 3);
    let mut b = stream_rng(5, 3);
    let _ = stream_rng(5, 2).random::<u64>();
    assert_eq!(a.random::<u64>(), b.random::<u64>());
}
