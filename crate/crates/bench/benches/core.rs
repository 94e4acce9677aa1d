use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use levelline_bench::{brownian_path, equally_spaced, lattice, two_point};
use levelline_core::dgff::{build_operator, sample_field, trace_level_line};
use levelline_core::formula::hit_free_arc_probability;
use levelline_core::loewner::{flow_point, trace_curve};
use levelline_core::sde::Integrator;
use levelline_core::{Complex64, StepControl};

fn formula(c: &mut Criterion) {
    let mut group = c.benchmark_group("free_arc_probability");
    for n in [2, 8, 32] {
        let cfg = equally_spaced(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &cfg, |b, cfg| {
            b.iter(|| hit_free_arc_probability(black_box(cfg)))
        });
    }
    group.finish();
}

fn trajectory(c: &mut Criterion) {
    let cfg = two_point();
    let integ = Integrator::new(&cfg, &StepControl::for_config(&cfg)).unwrap();
    let mut seed = 0;
    c.bench_function("trajectory_two_point", |b| {
        b.iter(|| {
            seed += 1;
            integ.run(black_box(seed))
        })
    });
}

fn loewner(c: &mut Criterion) {
    let path = brownian_path(1000, 7);
    c.bench_function("flow_point_1000_steps", |b| b.iter(|| flow_point(&path, black_box(Complex64::new(0.3, 0.2)))));
    let mut group = c.benchmark_group("trace_curve");
    group.sample_size(10);
    for steps in [250, 1000] {
        let path = brownian_path(steps, 7);
        group.bench_with_input(BenchmarkId::from_parameter(steps), &path, |b, path| b.iter(|| trace_curve(path)));
    }
    group.finish();
}

fn dgff(c: &mut Criterion) {
    let mut group = c.benchmark_group("dgff");
    group.sample_size(10);
    let spec = lattice(64);
    group.bench_function("build_operator_64", |b| b.iter(|| build_operator(black_box(&spec))));
    let op = build_operator(&spec).unwrap();
    let mut seed = 0;
    group.bench_function("sample_and_trace_64", |b| {
        b.iter(|| {
            seed += 1;
            let sample = sample_field(&op, seed);
            trace_level_line(&sample, &spec, 1)
        })
    });
    group.finish();
}

criterion_group!(benches, formula, trajectory, loewner, dgff);
criterion_main!(benches);
