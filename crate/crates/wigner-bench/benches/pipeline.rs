//! Benchmarks along the main pipeline: sampling, eigensolving, exact
//! oracle sums, graph canonicalization and flow iteration.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use wigner_core::cumulant::CumulantSpec;
use wigner_core::ensemble::{sample, EnsembleSpec};
use wigner_core::flow::{FlowState, Truncation};
use wigner_core::graph::enumerate_graphs;
use wigner_core::matrix::{HermitianEigenSolver, NalgebraEigenSolver};
use wigner_core::oracle::{exact_trace_moment, wick_pairing_moment};

fn bench_sampling(c: &mut Criterion) {
    let spec = EnsembleSpec::Gue { alpha: 1.0 };
    c.bench_function("sample_gue_n128", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            black_box(sample(&spec, 128, seed).unwrap())
        })
    });
}

fn bench_eigen(c: &mut Criterion) {
    let spec = EnsembleSpec::Gue { alpha: 1.0 };
    let solver = NalgebraEigenSolver;
    c.bench_function("eigenvalues_n128", |b| {
        b.iter_batched(
            || sample(&spec, 128, 7).unwrap(),
            |m| black_box(solver.eigenvalues(&m).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

fn bench_trace_powers(c: &mut Criterion) {
    let spec = EnsembleSpec::Gue { alpha: 1.0 };
    let m = sample(&spec, 128, 11).unwrap();
    c.bench_function("trace_powers_k6_n128", |b| {
        b.iter(|| black_box(m.trace_powers(6)))
    });
}

fn bench_oracle(c: &mut Criterion) {
    let spec = CumulantSpec::gaussian(1.0);
    c.bench_function("exact_trace_moment_n6_k6", |b| {
        b.iter(|| black_box(exact_trace_moment(&spec, 6, 6).unwrap()))
    });
    c.bench_function("wick_pairing_moment_k8", |b| {
        b.iter(|| black_box(wick_pairing_moment(8, 6, 1.0).unwrap()))
    });
}

fn bench_graphs(c: &mut Criterion) {
    c.bench_function("enumerate_graphs_4_4", |b| {
        b.iter(|| black_box(enumerate_graphs(4, 4).unwrap()))
    });
}

fn bench_flow(c: &mut Criterion) {
    let spec = CumulantSpec::gaussian(1.0);
    c.bench_function("flow_iterate_t5", |b| {
        b.iter(|| {
            let state = FlowState::initialize(
                &spec,
                Truncation {
                    max_t: 5,
                    max_vertices: 5,
                    max_edges: 5,
                },
            )
            .unwrap();
            black_box(state.iterate_to(5).unwrap())
        })
    });
}

criterion_group!(
    benches,
    bench_sampling,
    bench_eigen,
    bench_trace_powers,
    bench_oracle,
    bench_graphs,
    bench_flow
);
criterion_main!(benches);
