use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use epse_core::engine::{self, gamma_finite, lmmse_apply, EngineOptions, ExtrinsicMessage, ProblemInstance};
use epse_core::ensembles::{build_measurement, sample_haar_qr, sample_haar_reflectors, SpectralDensity};
use epse_core::random::{complex_normal_vec, stream_rng};
use epse_core::state_evolution::se_run;
use epse_core::{EnsembleSpec, Prior};
use std::hint::black_box;

const BG: Prior = Prior::Bg { p: 0.1 };

fn instance(n: usize) -> ProblemInstance {
    let mut rng = stream_rng(1, 0);
    let model = build_measurement(&EnsembleSpec::RowOrthogonalHaar {}, n / 2, n, &mut rng).unwrap();
    ProblemInstance::generate(model, &BG, 0.01, &mut rng).unwrap()
}

fn haar(c: &mut Criterion) {
    let mut g = c.benchmark_group("haar");
    for n in [128, 512] {
        g.bench_with_input(BenchmarkId::new("reflectors", n), &n, |b, &n| {
            let mut rng = stream_rng(2, 0);
            b.iter(|| sample_haar_reflectors(n, &mut rng))
        });
        g.bench_with_input(BenchmarkId::new("qr", n), &n, |b, &n| {
            let mut rng = stream_rng(3, 0);
            b.iter(|| sample_haar_qr(n, &mut rng))
        });
    }
    g.finish();
}

fn module_a(c: &mut Criterion) {
    let inst = instance(1024);
    let mut rng = stream_rng(4, 0);
    let r = complex_normal_vec(&mut rng, inst.model.m, 1.0);
    c.bench_function("lmmse_apply/1024", |b| {
        b.iter(|| lmmse_apply(&inst.model.factors, 0.01, black_box(0.3), &r).unwrap())
    });
    c.bench_function("gamma_finite/1024", |b| {
        b.iter(|| gamma_finite(&inst.model.factors, 0.01, black_box(0.3), 1024).unwrap())
    });
}

fn module_b(c: &mut Criterion) {
    let mut rng = stream_rng(5, 0);
    let n = 4096;
    let x = BG.sample(&mut rng, n);
    let z = complex_normal_vec(&mut rng, n, 0.1);
    let mean = x.iter().zip(&z).map(|(a, b)| a + b).collect();
    let msg = ExtrinsicMessage::new(mean, 0.1).unwrap();
    for prior in [BG, Prior::Qpsk {}] {
        c.bench_function(&format!("extrinsic_denoise/{prior}"), |b| {
            b.iter(|| prior.extrinsic_denoise(black_box(&msg)).unwrap())
        });
        c.bench_function(&format!("mmse/{prior}"), |b| b.iter(|| prior.mmse(black_box(0.1)).unwrap()));
    }
}

fn full_run(c: &mut Criterion) {
    let inst = instance(512);
    let opts = EngineOptions::default();
    let mut g = c.benchmark_group("run");
    g.sample_size(10);
    g.bench_function("run_ep/512x10", |b| b.iter(|| engine::run_ep(&inst, &BG, 10, &opts).unwrap()));
    let mp = SpectralDensity::marchenko_pastur(0.5, 4096).unwrap();
    g.bench_function("se_run/mp4096x10", |b| b.iter(|| se_run(&mp, 0.5, 0.01, &BG, 10).unwrap()));
    g.finish();
}

criterion_group!(benches, haar, module_a, module_b, full_run);
criterion_main!(benches);
