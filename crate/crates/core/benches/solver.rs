use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use epirt::epidata::load_graph;
use epirt::solver::solve;
use epirt::synth::{generate, ScenarioSpec};
use epirt::*;

const EXECUTIONS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn france() -> EpiGraph {
    load_graph(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/france_departements.graph")).unwrap()
}

fn counts(territories: usize, days: usize, seed: u64) -> CountMatrix {
    let spec =
        ScenarioSpec::shared(&[(0, 1.4), (days / 3, 0.8), (days - 1, 1.1)], territories, days, 80.0, seed).unwrap();
    generate(&spec, &SerialInterval::default(), Execution::Sequential).unwrap().0
}

/// Fixed-iteration joint solve on the département graph.
fn joint_solve(c: &mut Criterion) {
    let graph = france();
    let phi = SerialInterval::default();
    let mut group = c.benchmark_group("joint_solve_200_iterations");
    group.sample_size(10);
    for days in [120, 500] {
        let (z, _) = model::standardize(&counts(graph.num_vertices(), days, 1));
        let obs = Observations::from_counts(&z, &phi).unwrap();
        for (name, execution) in EXECUTIONS {
            let config = SolverConfig { epsilon: f64::MIN_POSITIVE, k_max: 200, execution, ..Default::default() };
            group.bench_with_input(BenchmarkId::new(name, days), &obs, |b, obs| {
                b.iter(|| solve(black_box(obs), &graph, &Hyperparameters::joint(), &config, None).unwrap())
            });
        }
    }
    group.finish();
}

/// Independent per-territory solves, parallel across territories.
fn per_territory(c: &mut Criterion) {
    let phi = SerialInterval::default();
    let z = counts(96, 300, 2);
    let graph = EpiGraph::empty(96);
    let mut group = c.benchmark_group("per_territory_500_iterations");
    group.sample_size(10);
    for (name, execution) in EXECUTIONS {
        let config = SolverConfig { epsilon: f64::MIN_POSITIVE, k_max: 500, execution, ..Default::default() };
        group.bench_function(name, |b| {
            b.iter(|| estimate_counts(black_box(&z), &phi, &graph, &Hyperparameters::per_territory(), &config).unwrap())
        });
    }
    group.finish();
}

/// Synthetic data generation for a département-sized scenario.
fn synthesis(c: &mut Criterion) {
    let phi = SerialInterval::default();
    let spec = ScenarioSpec::shared(&[(0, 1.3), (999, 0.9)], 96, 1000, 100.0, 3).unwrap();
    let mut group = c.benchmark_group("generate_96x1000");
    for (name, execution) in EXECUTIONS {
        group.bench_function(name, |b| b.iter(|| generate(black_box(&spec), &phi, execution).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, joint_solve, per_territory, synthesis);
criterion_main!(benches);
