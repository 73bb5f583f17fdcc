use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use xq_core::encoding::{canonical_mask, encode, FeatureVariant};
use xq_core::models::{NetConfig, Network};
use xq_core::records::{synthesize_games, SynthConfig};
use xq_core::rules::Position;
use xq_core::search::{search, SearchConfig};
use xq_core::sl::{build_sl_data, SlConfig, SlTrainer};

fn rules(c: &mut Criterion) {
    let start = Position::startpos();
    c.bench_function("perft 3", |b| b.iter(|| black_box(&start).perft(3)));
    c.bench_function("legal moves", |b| b.iter(|| black_box(&start).legal_moves()));
    c.bench_function("encode", |b| b.iter(|| encode(black_box(&start), FeatureVariant::BoardAllyEnemy)));
}

fn searcher(c: &mut Criterion) {
    let start = Position::startpos();
    let mut g = c.benchmark_group("alpha-beta");
    g.sample_size(10);
    for d in [2, 3] {
        g.bench_function(format!("depth {d}"), |b| b.iter(|| search(black_box(&start), &SearchConfig::depth(d)).unwrap()));
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let p = Position::startpos();
    let obs = encode(&p, FeatureVariant::BoardAllyEnemy);
    let mask = canonical_mask(&p);
    let mut g = c.benchmark_group("inference");
    for (name, cfg) in [("mod-resnet 2x32", NetConfig::mod_resnet(2, 32)), ("vit 2x32", NetConfig::vit(2, 32, 4))] {
        let net = Network::build(cfg, 0).unwrap();
        g.bench_function(format!("{name} single"), |b| b.iter(|| net.infer(black_box(&obs), &mask)));
        let batch: Vec<_> = (0..32).map(|_| &obs).collect();
        g.bench_function(format!("{name} batch 32"), |b| b.iter(|| net.evaluate_batch(black_box(&batch))));
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let records = synthesize_games(&SynthConfig { games: 8, draw_move_cap: 60, ..SynthConfig::default() }, 0).unwrap();
    let cfg = SlConfig { batch_size: 32, dataset_size: 256, eval_fraction: 0.0, ..SlConfig::default() };
    let data = build_sl_data(&records, &cfg, FeatureVariant::BoardAllyEnemy).unwrap();
    let trainer = SlTrainer::new(cfg, Network::build(NetConfig::mod_resnet(2, 32), 0).unwrap()).unwrap();
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("sl step batch 32", |b| {
        b.iter_batched(|| trainer.clone(), |mut t| t.train_step(&data.train), BatchSize::LargeInput)
    });
    g.finish();
}

criterion_group!(benches, rules, searcher, network, training);
criterion_main!(benches);
