//! Default rayon pool against a single-thread pool over the same code paths.
//! Build with `--no-default-features` to get the plain sequential loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPoolBuilder;

use somatlas::cluster::emd_matrix;
use somatlas::compare::{bootstrap_vector_field, BootstrapParams};
use somatlas::data::{flatten_samples, generate_synthetic_ensemble, random_archetypes, MonthFilter, SyntheticSpec};
use somatlas::distribution::{BmuIndex, RunDistribution};
use somatlas::geometry::Point;
use somatlas::som::{metrics, SomConfig, SomGrid};

fn grid(side: usize, dim: usize) -> SomGrid {
    let weights = (0..side * side * dim).map(|i| (i as f32 * 0.37).sin()).collect();
    let config = SomConfig {
        rows: side,
        cols: side,
        ..Default::default()
    };
    SomGrid::from_weights(config, dim, weights).unwrap()
}

fn cloud(n: usize, shift: f64) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let t = i as f64 * 0.618;
            [t.sin() * 2.0 + shift, (t * 1.7).cos()]
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let mut spec = SyntheticSpec::new(16, 16, 20, random_archetypes(3, 256, 1)).months(vec![1, 2, 3, 4, 5, 6]);
    for g in 0..6 {
        spec = spec.member(&format!("g{g}"), "historical", vec![1.0, 0.5, g as f64 * 0.1]);
    }
    let dataset = generate_synthetic_ensemble(&spec, 1).unwrap().normalize_per_month().unwrap();
    let samples = flatten_samples(&dataset, &MonthFilter::all()).unwrap();
    let som = grid(12, dataset.num_cells());
    let dists: Vec<RunDistribution> = (0..8).map(|i| RunDistribution::from_points(cloud(40, i as f64 * 0.2))).collect();
    let labels: Vec<String> = (0..8).map(|i| i.to_string()).collect();
    let (r1, r2) = (cloud(120, 0.0), cloud(120, 1.0));
    let params = BootstrapParams::default();

    let pools = [
        ("one-thread", ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("default", ThreadPoolBuilder::new().build().unwrap()),
    ];
    let mut group = c.benchmark_group("parallel");
    group.sample_size(10);
    for (name, pool) in &pools {
        group.bench_with_input(BenchmarkId::new("bmu_index", name), pool, |b, p| {
            b.iter(|| p.install(|| BmuIndex::compute(&dataset, &som).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("metrics", name), pool, |b, p| {
            b.iter(|| p.install(|| metrics(&som, &samples).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("emd_matrix", name), pool, |b, p| {
            b.iter(|| p.install(|| emd_matrix(labels.clone(), &dists).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("vector_field", name), pool, |b, p| {
            b.iter(|| p.install(|| bootstrap_vector_field(&r1, &r2, &params, None).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
