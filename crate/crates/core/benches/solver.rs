use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fsgl::bootstrap::{bootstrap_run, BootstrapConfig, RotationPolicy};
use fsgl::model::{build_design, irls_linearize_with, CoefficientSet};
use fsgl::parallel::Execution;
use fsgl::selection::{grid_search, TuningGrid};
use fsgl::sgl::SolverControls;
use fsgl::synthetic::{generate, yeast_like};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn linearize(c: &mut Criterion) {
    let data = generate(&yeast_like(400, 1)).unwrap().dataset;
    let design = build_design(&data).unwrap();
    let y = data.response();
    let coefs = CoefficientSet::zeros(&design.dims(), y.ncols());
    let mut group = c.benchmark_group("irls_linearize");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| irls_linearize_with(&design, &coefs, &y, exec))
        });
    }
    group.finish();
}

fn grid(c: &mut Criterion) {
    let data = generate(&yeast_like(120, 2)).unwrap().dataset;
    let design = build_design(&data).unwrap();
    let y = data.response();
    let grid = TuningGrid::auto(20, 0.01, vec![0.25, 0.5, 0.75, 0.95]);
    let mut group = c.benchmark_group("grid_search");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| grid_search(&design, &y, &grid, &SolverControls::default(), exec).unwrap())
        });
    }
    group.finish();
}

fn bootstrap(c: &mut Criterion) {
    let data = generate(&yeast_like(100, 3)).unwrap().dataset;
    let grid = TuningGrid::auto(8, 0.05, vec![0.5]);
    let config = BootstrapConfig { replicates: 4, seed: 1, rotation: RotationPolicy::All, max_attempts: 100 };
    let mut group = c.benchmark_group("bootstrap_run");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| bootstrap_run(&data, &grid, &SolverControls::default(), &config, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, linearize, grid, bootstrap);
criterion_main!(benches);
