use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use odp_bench::lattices;
use odp_core::rnnt_loss;

fn bench_loss(c: &mut Criterion) {
    let small = lattices(64, 4, 3, 5, 0);
    c.bench_function("rnnt_loss small lattices x64", |b| {
        b.iter(|| {
            for (lp, labels) in &small {
                black_box(rnnt_loss(black_box(lp), labels).unwrap());
            }
        })
    });
    let large = lattices(8, 60, 20, 30, 1);
    c.bench_function("rnnt_loss T<=60 U<=20 x8", |b| {
        b.iter(|| {
            for (lp, labels) in &large {
                black_box(rnnt_loss(black_box(lp), labels).unwrap());
            }
        })
    });
}

criterion_group!(benches, bench_loss);
criterion_main!(benches);
