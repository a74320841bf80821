//! Sequential against rayon-parallel execution of the hot loops.
//!
//! Both paths give identical results; the rayon pool size follows
//! `RAYON_NUM_THREADS`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use defotox::cohort::synth_phantom;
use defotox::field::{jacobian_field, warp};
use defotox::nn::{Graph, Tensor};
use defotox::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", true), ("parallel", false)]
}

fn field_ops(c: &mut Criterion) {
    let p = synth_phantom(1, 8.0, [48; 3]).unwrap();
    let u = &p.scans[0].gt_dvf;
    let mut group = c.benchmark_group("field_48");
    group.sample_size(10);
    for (name, seq) in modes() {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::new("warp", name), |b| b.iter(|| warp(&p.pct, u).unwrap()));
        group.bench_function(BenchmarkId::new("jacobian", name), |b| b.iter(|| jacobian_field(u).unwrap()));
    }
    par::set_sequential(false);
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut rand = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let x = rand(vec![4, 8, 24, 24, 24]);
    let w = rand(vec![8, 8, 3, 3, 3]);
    let mut group = c.benchmark_group("conv3d_24");
    group.sample_size(10);
    for (name, seq) in modes() {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone());
                let wv = g.leaf(w.clone());
                let y = g.conv3d(xv, wv, None, 1, 1).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap()
            })
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, field_ops, conv);
criterion_main!(benches);
