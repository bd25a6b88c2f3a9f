//! Sequential against rayon execution for the node-parallel kernels.
//!
//! cargo bench -p twophase-core --bench kernels

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use twophase_core::elliptic::{OperatorKind, OperatorSpec};
use twophase_core::grid::{build_grid, phase_split_with, Grid, ScalarField};
use twophase_core::jump_law::{two_plane_field, JumpLaw, LawKind, TwoPlane};
use twophase_core::regularity::fit_plane_with;
use twophase_core::solver::{solve_dirichlet_with, SolveConfig};
use twophase_core::viscosity::{check_interior_with, TestProfileFamily};
use twophase_core::Exec;

fn policies() -> Vec<(&'static str, Exec)> {
    let mut p = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    p.push(("parallel", Exec::Parallel));
    p
}

fn setup(h: f64) -> (Arc<Grid>, JumpLaw, ScalarField) {
    let grid = build_grid(2, 1.0, h).unwrap();
    let law = JumpLaw::new(LawKind::Sqrt1p, 1.0, 0.5, 0.1).unwrap();
    let plane = TwoPlane::new(&law, 1.0, &[0.2, 1.0], &[0.0, 0.05]).unwrap();
    let field = two_plane_field(&grid, &plane).unwrap();
    (grid, law, field)
}

fn kernels(c: &mut Criterion) {
    let (_, law, field) = setup(1.0 / 128.0);
    let op = OperatorSpec::new(OperatorKind::Laplace, 1.0, 1.0).unwrap();
    let family = TestProfileFamily::default();

    let mut g = c.benchmark_group("phase_split");
    for (name, exec) in policies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| phase_split_with(black_box(&field), exec)));
    }
    g.finish();

    let mut g = c.benchmark_group("check_interior");
    g.sample_size(10);
    for (name, exec) in policies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| check_interior_with(black_box(&field), &op, &family, 1.0, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("fit_plane");
    g.sample_size(10);
    for (name, exec) in policies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fit_plane_with(black_box(&field), 0.5, &law, exec).unwrap())
        });
    }
    g.finish();

    let (small, _, data) = setup(1.0 / 32.0);
    let config = SolveConfig::default();
    let mut g = c.benchmark_group("solve_dirichlet");
    g.sample_size(10);
    for (name, exec) in policies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| solve_dirichlet_with(&small, &op, &law, black_box(&data), &config, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
