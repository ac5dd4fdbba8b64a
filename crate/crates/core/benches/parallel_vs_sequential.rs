//! Sequential vs data-parallel execution of the three hot loops: static
//! loss gradient, BPTT over a batch of sequences, and backtest ranking.
//! Both modes produce identical results; only wall time differs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stylerec::catalog::build_purchase_matrix;
use stylerec::dynamic_model::{
    bptt_gradients, prepare_sequence, DynamicRecommender, LossKind, LstmParams, TimeEncoding,
};
use stylerec::evaluation::{evaluate_model, test_customers, CandidateSet};
use stylerec::numerics::Rng;
use stylerec::static_model::{encode_all, static_loss_grad, EncoderParams, StaticBatch, StaticConfig, StaticModel};
use stylerec::synthgen::{generate_market, GenConfig, Market};
use stylerec::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn market() -> Market {
    generate_market(&GenConfig {
        customers: 400,
        articles: 1000,
        horizon_days: 365,
        ..Default::default()
    })
    .unwrap()
}

fn benches(c: &mut Criterion) {
    let m = market();
    let features = m.catalog.features(&m.schema).unwrap();
    let customers: Vec<String> = m.train.iter().map(|s| s.customer.clone()).collect();
    let matrix = build_purchase_matrix(&m.train, &customers, &m.catalog).unwrap();
    let cfg = StaticConfig {
        hidden: vec![64],
        dim: 32,
        ..Default::default()
    };
    let model = StaticModel::init(features[0].len(), &matrix, &cfg, &mut Rng::new(1));
    let buyers = matrix.buyers_by_article();
    let batch = StaticBatch {
        features: features[..128].iter().map(Vec::as_slice).collect(),
        buyers: buyers[..128].iter().map(Vec::as_slice).collect(),
    };
    let mut group = c.benchmark_group("static_loss_grad");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| static_loss_grad(black_box(&model.encoder), &model.profiles, &batch, exec).unwrap())
        });
    }
    group.finish();

    let enc: &EncoderParams = &model.encoder;
    let dna = encode_all(enc, &features, Execution::Sequential).unwrap();
    let params = LstmParams::init(TimeEncoding::Cyclic, 64, 32, &mut Rng::new(2));
    let mut rng = Rng::new(3);
    let prepared: Vec<_> = m.train[..32]
        .iter()
        .map(|s| prepare_sequence(s, &m.catalog, &dna, TimeEncoding::Cyclic, 20, &mut rng).unwrap())
        .collect();
    let mut group = c.benchmark_group("bptt_gradients");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| bptt_gradients(black_box(&params), &prepared, &dna, LossKind::Rank, exec).unwrap())
        });
    }
    group.finish();

    let candidates = CandidateSet::in_window(&m.catalog, m.test_window.0, m.test_window.1);
    let test = test_customers(&m.train, &m.test);
    let rec = DynamicRecommender::new(&params, &dna, &candidates, 4);
    let mut group = c.benchmark_group("evaluate_dynamic");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate_model(&rec, black_box(&test), &candidates, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(parallel_vs_sequential, benches);
criterion_main!(parallel_vs_sequential);
