use std::hint::black_box;

use arbolatent::inducer::MttVariant;
use arbolatent::model::{forward_pass, training_table, Mode};
use arbolatent::synthetic;
use arbolatent::trees::cle_extract;
use arbolatent::verify::random_scores;
use arbolatent::{marginals, Config, Model, Tape};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIZES: [usize; 4] = [8, 16, 32, 64];

fn bench_marginals(c: &mut Criterion) {
    let mut group = c.benchmark_group("mtt_marginals");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in SIZES {
        let scores = random_scores(m, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(m), &scores, |b, s| {
            b.iter(|| marginals(black_box(s)).unwrap())
        });
    }
    group.finish();
}

fn bench_decode(c: &mut Criterion) {
    let mut group = c.benchmark_group("cle_decode");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in SIZES {
        let tm = marginals(&random_scores(m, &mut rng)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(m), &tm, |b, tm| {
            b.iter(|| cle_extract(black_box(tm)).unwrap())
        });
    }
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let corpus = synthetic::generate(32, 3);
    let config = Config::default();
    let model = Model::new(config.clone(), &training_table(&corpus, &config)).unwrap();
    let inst = corpus.iter().max_by_key(|i| i.len()).unwrap();

    c.bench_function("model_forward", |b| b.iter(|| model.predict(black_box(inst)).unwrap()));
    c.bench_function("model_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let pass = forward_pass(
                &mut tape,
                &model.params,
                &model.config,
                &model.vocab,
                black_box(inst),
                Mode::Train { dropout_seed: 5 },
                MttVariant::Standard,
            )
            .unwrap();
            tape.gradients(pass.loss).unwrap()
        })
    });
}

criterion_group!(benches, bench_marginals, bench_decode, bench_model);
criterion_main!(benches);
