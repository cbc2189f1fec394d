use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use trsbts_bench::{component, hopf_model, hopf_path};
use trsbts_core::bridge::NoiseMode;
use trsbts_core::generator::{fit_single, generate_single};
use trsbts_core::linalg::{psd_project, SymMatrix};
use trsbts_core::rng;
use trsbts_core::scoring::energy_score_window;

fn psd(c: &mut Criterion) {
    let mut g = c.benchmark_group("psd_project");
    for d in [2usize, 8, 32] {
        let m = SymMatrix::from_fn(d, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + if i == j { 1.0 } else { 0.0 });
        g.bench_with_input(BenchmarkId::from_parameter(d), &m, |b, m| b.iter(|| psd_project(black_box(m))));
    }
    g.finish();
}

fn fit(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit_single");
    g.sample_size(10);
    for d in [4usize, 16] {
        let p = hopf_path(d, 2.0);
        g.bench_with_input(BenchmarkId::new("pcr", d), &p, |b, p| {
            b.iter(|| fit_single(vec![p.clone()], &component(true)).unwrap())
        });
    }
    g.finish();
}

fn generate(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_single_20_steps");
    g.sample_size(10);
    for (d, pcr) in [(4usize, true), (16, true), (16, false)] {
        let (fc, p) = hopf_model(d, 2.0, pcr);
        let name = if pcr { "pcr" } else { "full" };
        g.bench_function(BenchmarkId::new(name, d), |b| {
            let mut r = rng::stream(0, 0);
            b.iter(|| generate_single(&fc, &p.states[..2], 22, &mut r, NoiseMode::On).unwrap())
        });
    }
    g.finish();
}

fn energy(c: &mut Criterion) {
    let ens: Vec<Vec<f64>> = (0..64).map(|k| vec![(k as f64).sin(), (k as f64 * 0.3).cos()]).collect();
    c.bench_function("energy_score_window_l64", |b| {
        b.iter(|| energy_score_window(black_box(&ens), black_box(&[0.1, 0.2])).unwrap())
    });
}

criterion_group!(benches, psd, fit, generate, energy);
criterion_main!(benches);
