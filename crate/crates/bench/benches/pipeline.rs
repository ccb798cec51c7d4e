use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use ecgalign::checkpoint::Checkpoint;
use ecgalign::delineation::extract_features;
use ecgalign::model::{DualEncoder, EmbeddingVector, LossWeights, ModelConfig};
use ecgalign::retrieval::{build_index, query_topk, recall_at_k};
use ecgalign::synth::{self, SynthParams};
use ecgalign::text::{TokenSeq, BOS, EOS};
use ecgalign::train::model_checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn delineation(c: &mut Criterion) {
    let mut group = c.benchmark_group("delineation");
    for bpm in [50.0, 120.0] {
        let (rec, _) = synth::generate(&SynthParams::at_rate(bpm));
        group.bench_with_input(BenchmarkId::new("extract_features", bpm), &rec, |b, rec| {
            b.iter(|| extract_features(black_box(rec)).unwrap())
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieval");
    for n in [1_000, 10_000] {
        let vecs = unit_vectors(n, 512, 1);
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        let index = build_index(vecs, ids).unwrap();
        let q = EmbeddingVector::from_unit(unit_vectors(1, 512, 2).remove(0)).unwrap();
        group.bench_with_input(BenchmarkId::new("query_top10", n), &index, |b, index| {
            b.iter(|| query_topk(black_box(&q), index, 10).unwrap())
        });
    }
    let x: Vec<_> = unit_vectors(256, 128, 3)
        .into_iter()
        .map(|v| EmbeddingVector::from_unit(v).unwrap())
        .collect();
    let y: Vec<_> = unit_vectors(256, 128, 4)
        .into_iter()
        .map(|v| EmbeddingVector::from_unit(v).unwrap())
        .collect();
    group.bench_function("recall_at_5_n256", |b| {
        b.iter(|| recall_at_k(black_box(&x), &y, 5).unwrap())
    });
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model_tiny");
    group.sample_size(20);
    let model = DualEncoder::new(ModelConfig::tiny(64), 0).unwrap();
    let recs: Vec<_> = (0..8)
        .map(|s| synth::generate(&synth::random_params(s)).0)
        .collect();
    let texts: Vec<TokenSeq> = (0..8u32)
        .map(|s| TokenSeq {
            ids: vec![BOS, 4 + s, 20 + s, 40 + s, EOS],
        })
        .collect();
    let rr: Vec<_> = recs.iter().collect();
    let tr: Vec<_> = texts.iter().collect();
    group.bench_function("encode_ecg_batch8", |b| {
        b.iter(|| model.encode_ecg_batch(black_box(&rr)).unwrap())
    });
    group.bench_function("loss_and_grad_batch8", |b| {
        b.iter(|| {
            model
                .loss_and_grad(black_box(&rr), &tr, LossWeights::default())
                .unwrap()
        })
    });
    group.bench_function("contrastive_only_batch8", |b| {
        let w = LossWeights {
            contrastive: 1.0,
            captioning: 0.0,
        };
        b.iter(|| model.loss_and_grad(black_box(&rr), &tr, w).unwrap())
    });
    group.finish();
}

fn checkpoint(c: &mut Criterion) {
    let model = DualEncoder::new(ModelConfig::tiny(64), 0).unwrap();
    let reports = ["sinus rhythm.", "sinus bradycardia."];
    let vocab = ecgalign::text::Vocab::build(&reports, 1).unwrap();
    let ckpt = model_checkpoint(&model, &vocab, None, 0);
    let bytes = ckpt.to_bytes();
    c.bench_function("checkpoint_to_bytes", |b| {
        b.iter(|| black_box(&ckpt).to_bytes())
    });
    c.bench_function("checkpoint_from_bytes", |b| {
        b.iter_batched(
            || bytes.clone(),
            |v| Checkpoint::from_bytes(&v).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, delineation, retrieval, model, checkpoint);
criterion_main!(benches);
