use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use cleft_bench::matrix;
use cleft_core::checkpoint;
use cleft_core::objectives::{info_nce_symmetric, Denominator, Temperature};
use cleft_core::autograd::AttentionGeometry;
use cleft_core::Graph;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [16usize, 64, 128] {
        let (a, b) = (matrix(n, n, 1), matrix(n, n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.leaf(&a, true);
                let y = g.leaf(&b, true);
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap();
                black_box(g.grad(x).map(|v| v[0]))
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let (seq, d, heads) = (24, 32, 4);
    let (q, k, v) = (matrix(seq, d, 3), matrix(seq, d, 4), matrix(seq, d, 5));
    c.bench_function("attention_causal_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.leaf(&q, true), g.leaf(&k, true), g.leaf(&v, true));
            let geom = AttentionGeometry {
                batch: 1,
                seq,
                heads,
                causal: true,
                key_valid: None,
            };
            let o = g.attention(qv, kv, vv, None, &geom).unwrap();
            let s = g.sum(o);
            g.backward(s).unwrap();
            black_box(g.grad(qv).map(|x| x[0]))
        })
    });
}

fn loss(c: &mut Criterion) {
    let temp = Temperature::from_tau(0.07).unwrap();
    let mut group = c.benchmark_group("info_nce");
    for n in [16usize, 72] {
        let (i, t) = (matrix(n, 32, 6), matrix(n, 32, 7));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(info_nce_symmetric(&i, &t, temp, Denominator::Inclusive).unwrap().total))
        });
    }
    group.finish();
}

fn checkpoint_io(c: &mut Criterion) {
    let entries: checkpoint::Entries = (0..32).map(|i| (format!("p{i:02}"), matrix(64, 64, i))).collect();
    let bytes = checkpoint::to_bytes(&entries).unwrap();
    c.bench_function("checkpoint_encode", |b| b.iter(|| black_box(checkpoint::to_bytes(&entries).unwrap().len())));
    c.bench_function("checkpoint_decode", |b| b.iter(|| black_box(checkpoint::from_bytes(&bytes).unwrap().len())));
}

criterion_group!(benches, matmul, attention, loss, checkpoint_io);
criterion_main!(benches);
