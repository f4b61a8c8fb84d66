use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use probshape::estimators::{du_at, EngineConfig, Representation, ShapeDerivativeEngine};
use probshape::geometry::Direction;
use probshape::par::Backend;
use probshape::simulate::SimConfig;
use probshape::{PerturbationField, Point, Problem};

fn backends() -> [(&'static str, Backend); 2] {
    [
        ("parallel", Backend::Parallel),
        ("sequential", Backend::Sequential),
    ]
}

fn du_paths(c: &mut Criterion) {
    let problem = Problem::benchmark();
    let v1 = PerturbationField::builtin(Direction::V1);
    let x = Point::new(0.3, -0.2);
    let mut group = c.benchmark_group("du_at_4000_paths");
    group.sample_size(10);
    for (name, backend) in backends() {
        let cfg = SimConfig {
            backend,
            ..SimConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| du_at(&problem, &x, &v1, 4000, &cfg, Representation::Weight).unwrap())
        });
    }
    group.finish();
}

fn engine_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("engine_build_2000_paths");
    group.sample_size(10);
    for (name, backend) in backends() {
        let config = EngineConfig {
            n_paths: 2000,
            n_constant_samples: 50_000,
            sim: SimConfig {
                backend,
                ..SimConfig::default()
            },
            ..EngineConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| ShapeDerivativeEngine::build(Problem::benchmark(), config).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, du_paths, engine_build);
criterion_main!(benches);
