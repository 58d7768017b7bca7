//! Explicit group-sum twirl on rayon against the sequential loop, with the
//! closed-form mask as a floor.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use num::complex::Complex64;
use qrf_core::kinspace::{CMat, KinOperator};
use qrf_core::models::{build_model, ModelKind, ModelSpec};
use qrf_core::relobs::{g_twirl, g_twirl_sum, g_twirl_sum_seq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cases() -> Vec<(String, ModelSpec)> {
    vec![
        ("newtonian-16".into(), ModelSpec { lattice: 16, ..ModelSpec::new(ModelKind::Newtonian) }),
        ("nparticle-8".into(), ModelSpec { lattice: 8, ..ModelSpec::new(ModelKind::NParticle) }),
        ("degenerate-32".into(), ModelSpec { lattice: 32, energies: vec![1, 2, 3], ..ModelSpec::new(ModelKind::Degenerate) }),
    ]
}

fn bench_twirl(c: &mut Criterion) {
    let mut group = c.benchmark_group("g_twirl");
    group.sample_size(10);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (name, spec) in cases() {
        let m = build_model(&spec).expect("benchmark model");
        let d = m.space.dim;
        let a = KinOperator::dense(&m.space, CMat::from_fn(d, d, |_, _| Complex64::new(rng.gen(), rng.gen())));
        let label = format!("{name} (dim {d}, |G| {})", m.constraint.group_order);
        group.bench_with_input(BenchmarkId::new("rayon", &label), &a, |b, a| {
            b.iter(|| g_twirl_sum(&m.space, &m.constraint, black_box(a)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", &label), &a, |b, a| {
            b.iter(|| g_twirl_sum_seq(&m.space, &m.constraint, black_box(a)))
        });
        group.bench_with_input(BenchmarkId::new("mask", &label), &a, |b, a| {
            b.iter(|| g_twirl(&m.space, &m.constraint, black_box(a)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_twirl);
criterion_main!(benches);
