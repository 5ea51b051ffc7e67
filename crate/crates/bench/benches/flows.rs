use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use snflow::density::{logdensity_mc, DensityConfig};
use snflow::dynamics::{FieldConfig, Noise};
use snflow::solve::{augment, wz_solve_augmented, SolveConfig};
use snflow::train::{adjoint_grads, discretize_grads, Batch, GradMode, GradSettings, Nll};
use snflow_bench::{banana_data, banana_model, kl_paths};

fn solves(c: &mut Criterion) {
    let model = banana_model(0);
    let x = banana_data(1000, 1);
    let paths = kl_paths(2, 4, 1, 2);
    let mut g = c.benchmark_group("reverse_solve_1000_rows");
    for steps in [4, 16] {
        g.bench_with_input(BenchmarkId::new("rk4", steps), &steps, |b, &steps| {
            let cfg = SolveConfig::rk4(steps).reverse();
            b.iter(|| wz_solve_augmented(&model, Noise::Shared(&paths[0]), &augment(&x), &cfg, &FieldConfig::default(), None).unwrap())
        });
    }
    g.bench_function("adaptive_1e-6", |b| {
        let cfg = SolveConfig::adaptive(1e-6, 1e-6).reverse();
        b.iter(|| wz_solve_augmented(&model, Noise::Shared(&paths[0]), &augment(&x), &cfg, &FieldConfig::default(), None).unwrap())
    });
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let model = banana_model(0);
    let x = banana_data(256, 1);
    let paths = kl_paths(2, 4, 1, 2);
    let batch = Batch {
        start: &x,
        noise: Noise::Shared(&paths[0]),
        probe: None,
    };
    let settings = |mode| GradSettings {
        mode,
        solve: SolveConfig::rk4(4),
        ..GradSettings::default()
    };
    let mut g = c.benchmark_group("nll_gradient_256_rows");
    g.sample_size(20);
    g.bench_function("adjoint", |b| b.iter(|| adjoint_grads(&model, batch, &Nll, &settings(GradMode::Adjoint)).unwrap()));
    g.bench_function("discretize", |b| b.iter(|| discretize_grads(&model, batch, &Nll, &settings(GradMode::Discretize)).unwrap()));
    g.finish();
}

fn density(c: &mut Criterion) {
    let model = banana_model(0);
    let x = banana_data(64, 1);
    let paths = kl_paths(2, 6, 16, 3);
    let cfg = DensityConfig::default();
    let mut g = c.benchmark_group("logdensity_mc");
    g.sample_size(10);
    g.bench_function("64_points_16_paths", |b| b.iter(|| logdensity_mc(&model, &paths, &x, &cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, solves, gradients, density);
criterion_main!(benches);
