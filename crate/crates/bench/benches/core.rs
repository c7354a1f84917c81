use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use l2nnn::attack::{pgd_l2_batch, AttackConfig};
use l2nnn::certify::jacobian_l2_norm;
use l2nnn::layers::{weight_bound_b, WeightMode};
use l2nnn::losses::{total_loss, LossConfig};
use l2nnn::model::{Classifier, Model, ModelSpec};
use l2nnn::Tape;
use l2nnn_bench::fixture;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bound(c: &mut Criterion) {
    let w = fixture(&[128, 576], 1).map(|v| v - 0.5);
    c.bench_function("weight_bound_b 128x576", |b| b.iter(|| weight_bound_b(black_box(&w))));
}

fn model(c: &mut Criterion) {
    let m = Model::new(ModelSpec::default_mnist(), WeightMode::Rescale, 0);
    let frozen = m.frozen();
    let x = fixture(&[64, 1, 28, 28], 2);
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    c.bench_function("forward batch 64", |b| b.iter(|| frozen.logits(black_box(&x)).unwrap()));
    let cfg = LossConfig::new(10);
    c.bench_function("loss + backward batch 64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let t = total_loss(&mut tape, &m, &x, &labels, &cfg, &mut rng).unwrap();
            tape.backward(t.total).unwrap();
        })
    });
    let x8 = fixture(&[8, 1, 28, 28], 3);
    let attack = AttackConfig::new(1.5, 10).unwrap().with_restarts(1);
    c.bench_function("pgd 10 steps batch 8", |b| {
        b.iter(|| pgd_l2_batch(&frozen, &x8, &labels[..8], &[1.5; 8], &attack).unwrap())
    });
    let x1 = fixture(&[1, 28, 28], 4);
    c.bench_function("jacobian norm", |b| b.iter(|| jacobian_l2_norm(&frozen, &x1, 0).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bound, model
}
criterion_main!(benches);
