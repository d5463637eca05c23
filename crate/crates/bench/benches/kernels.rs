use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use offtarget_bench::{corpora, langid, model, tag, tagged};
use offtarget_core::toymodel::train_lexical;
use offtarget_core::{beam_search, masked_softmax, DecodeConfig, ScoreVector, VocabMask};

fn softmax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("masked_softmax");
    for size in [64usize, 1024, 16384] {
        let z = ScoreVector((0..size).map(|_| rng.gen_range(-10.0..10.0)).collect());
        let mask = VocabMask {
            language: tag("B"),
            allowed: (0..size).map(|i| i % 3 != 0).collect(),
        };
        group.bench_with_input(BenchmarkId::new("unmasked", size), &z, |b, z| {
            b.iter(|| masked_softmax(black_box(z), None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("masked", size), &z, |b, z| {
            b.iter(|| masked_softmax(black_box(z), Some(&mask)).unwrap())
        });
    }
    group.finish();
}

fn beam(c: &mut Criterion) {
    let model = model(100);
    let src = model.joint().encode(&corpora(100, 1)[0].pairs()[0].src);
    let mut group = c.benchmark_group("beam_search");
    for k in [1usize, 4, 16] {
        let cfg = DecodeConfig::default().with_beam(k);
        group.bench_with_input(BenchmarkId::from_parameter(k), &cfg, |b, cfg| {
            b.iter(|| beam_search(&model, black_box(&src), &tag("B"), cfg, None).unwrap())
        });
    }
    group.finish();
}

fn em(c: &mut Criterion) {
    let (corpus, joint) = tagged(&corpora(100, 500));
    c.bench_function("em_5_iterations_2000_pairs", |b| {
        b.iter(|| train_lexical(black_box(&corpus), &joint, 5, true).unwrap())
    });
}

fn identify(c: &mut Criterion) {
    let (model, probes) = langid();
    c.bench_function("langid_identify_300", |b| {
        b.iter(|| {
            for p in &probes {
                black_box(model.identify(p).unwrap());
            }
        })
    });
}

criterion_group!(benches, softmax, beam, em, identify);
criterion_main!(benches);
