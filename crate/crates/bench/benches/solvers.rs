use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ttmlab::fields::AdField;
use ttmlab::solvers::{sample_many, step_ddim, step_genie, step_ttm3, to_bar};
use ttmlab::{EpsField, Method, SolverRun};
use ttmlab_bench::{distilled_field, probe_points, toy_field};

fn single_steps(c: &mut Criterion) {
    let f = toy_field();
    let g = f.schedule().gamma(0.5).unwrap();
    let xs: Vec<_> = probe_points(64).into_iter().map(|x| to_bar(x, g)).collect();
    let mut group = c.benchmark_group("step");
    group.bench_function("ddim", |b| {
        b.iter(|| xs.iter().map(|&x| step_ddim(&f, black_box(x), 0.5, 0.45).unwrap()).collect::<Vec<_>>())
    });
    group.bench_function("genie", |b| {
        b.iter(|| xs.iter().map(|&x| step_genie(&f, black_box(x), 0.5, 0.45).unwrap()).collect::<Vec<_>>())
    });
    group.bench_function("ttm3", |b| {
        b.iter(|| xs.iter().map(|&x| step_ttm3(&f, black_box(x), 0.5, 0.45).unwrap()).collect::<Vec<_>>())
    });
    group.finish();
}

fn derivative_sources(c: &mut Criterion) {
    let distilled = distilled_field();
    let ad = AdField {
        f: distilled.eps_net.clone(),
        schedule: distilled.schedule,
    };
    let xs = probe_points(64);
    let mut group = c.benchmark_group("d_gamma_eps");
    group.bench_function("head", |b| {
        b.iter(|| xs.iter().map(|&x| distilled.eps_d_gamma(black_box(x), 0.5).unwrap()).collect::<Vec<_>>())
    });
    group.bench_function("jvp", |b| {
        b.iter(|| xs.iter().map(|&x| ad.eps_d_gamma(black_box(x), 0.5).unwrap()).collect::<Vec<_>>())
    });
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let f = toy_field();
    let mut group = c.benchmark_group("sample_256");
    group.sample_size(20);
    for m in [Method::Ddim, Method::Genie, Method::Ab4] {
        for nfe in [10, 25] {
            let mut run = SolverRun::new(m, nfe);
            if m.is_multistep() {
                run.striding = ttmlab::StridingKind::Linear;
            }
            group.bench_with_input(BenchmarkId::new(m.to_string(), nfe), &run, |b, run| {
                b.iter(|| sample_many(&f, run, 256).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, single_steps, derivative_sources, sampling);
criterion_main!(benches);
