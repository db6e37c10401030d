use a2s_bench::fixture;
use a2s_core::evalmetrics::{build_bm25_index, roc_auc, Bm25Params};
use a2s_core::synthgen::{augment, Backend, Strategy, TemplateId};
use a2s_core::training::{backward, LossConfig};
use a2s_core::towers::Mode;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn training_step(c: &mut Criterion) {
    let f = fixture(500, 32);
    let batch: Vec<_> = f.pairs.iter().take(64).map(|(q, d, y)| (q, d, *y)).collect();
    let loss = LossConfig::default();
    c.bench_function("forward_backward_b64_d32", |b| {
        b.iter(|| backward(black_box(&batch), &f.params, &loss, Mode::Train { seed: 1 }, 0).unwrap())
    });
}

fn synthgen(c: &mut Criterion) {
    let f = fixture(500, 8);
    let backend = Backend::Deterministic { seed: 0 };
    c.bench_function("augment_s3_det_500_listings", |b| {
        b.iter(|| augment(black_box(&f.corpus), Strategy::S3, &backend, TemplateId::T2Detailed, 10).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let f = fixture(2000, 8);
    let index = build_bm25_index(f.corpus.listings.as_slice()).unwrap();
    let params = Bm25Params::default();
    c.bench_function("bm25_rank_2000_docs", |b| b.iter(|| index.rank(&params, black_box("red leather sofa austin"))));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("roc_auc_10k", |b| {
        b.iter_batched(
            || {
                let s: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
                let y: Vec<u8> = (0..10_000).map(|i| (i % 3 == 0) as u8).collect();
                (s, y)
            },
            |(s, y)| roc_auc(&s, &y).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, training_step, synthgen, metrics);
criterion_main!(benches);
