use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fas_bench::{client_state, random_params};
use fas_core::protocol::{client_apply_aggregate, client_prepare_update, server_aggregate, ServerState};
use fas_core::crypto_he::DEFAULT_SCALE;
use fas_core::ClientKeys;
use std::hint::black_box;

const WEIGHTS: usize = 512;
const CLIENTS: u32 = 4;

// One round of the pipeline at several encryption fractions, 2048-bit keys.
fn pipeline(c: &mut Criterion) {
    let keys = ClientKeys::derive(2048, 5).unwrap();
    let params = random_params(WEIGHTS, 1.0, 11);
    let shape = params.shape.clone();
    let mut group = c.benchmark_group("round");
    group.sample_size(10);
    for pct in [0.0, 10.0, 50.0, 100.0] {
        let mut state = client_state(0, &keys, pct, 1.0);
        group.bench_with_input(BenchmarkId::new("prepare", pct), &pct, |b, _| {
            b.iter(|| client_prepare_update(&mut state, 0, black_box(&params), 10).unwrap())
        });

        let mut states: Vec<_> = (0..CLIENTS).map(|k| client_state(k, &keys, pct, 1.0)).collect();
        let updates: Vec<_> = states
            .iter_mut()
            .map(|s| client_prepare_update(s, 0, &params, 10).unwrap())
            .collect();
        let server = ServerState::new(keys.server_view(), states[0].policy, WEIGHTS, DEFAULT_SCALE).unwrap();
        group.bench_with_input(BenchmarkId::new("aggregate", pct), &pct, |b, _| {
            b.iter(|| server_aggregate(&server, black_box(&updates)).unwrap())
        });
        let agg = server_aggregate(&server, &updates).unwrap();
        group.bench_with_input(BenchmarkId::new("apply", pct), &pct, |b, _| {
            b.iter(|| client_apply_aggregate(&states[0], black_box(&agg), &shape).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
