use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mbbsim::dynamics::run_batch;
use mbbsim::scenarios::{build_case_a, build_case_b, build_case_c};
use mbbsim::{ExecutionMode, NetworkModel, Simulation, SimulationConfig};

const MODES: [(&str, ExecutionMode); 2] = [("sequential", ExecutionMode::Sequential), ("parallel", ExecutionMode::Parallel)];

/// Three short case runs side by side.
fn bench_batch(c: &mut Criterion) {
    let model = NetworkModel::builtin();
    let jobs: Vec<_> = [build_case_a(), build_case_b(), build_case_c()]
        .into_iter()
        .map(|s| (s, SimulationConfig { t_end: 0.5, execution: ExecutionMode::Sequential, ..Default::default() }))
        .collect();
    let mut group = c.benchmark_group("case_batch");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| black_box(run_batch(&model, &jobs, mode)))
        });
    }
    group.finish();
}

/// Per-step island solves of case A (two live islands).
fn bench_island_step(c: &mut Criterion) {
    let model = NetworkModel::builtin();
    let scenario = build_case_a();
    let mut group = c.benchmark_group("case_a_steps");
    group.sample_size(10);
    for (name, mode) in MODES {
        let config = SimulationConfig { execution: mode, ..SimulationConfig::for_scenario(&scenario) };
        group.bench_function(name, |b| {
            b.iter_batched(
                || Simulation::new(&model, &scenario, config).expect("case A initializes"),
                |mut sim| {
                    for _ in 0..100 {
                        sim.step().expect("step");
                    }
                    black_box(sim.time())
                },
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bench_batch, bench_island_step);
criterion_main!(benches);
