use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cvqd_core::denoiser::param_init;
use cvqd_core::fock::make_coherent;
use cvqd_core::linalg::c;
use cvqd_core::trainer::{batch_gradient, GenerativeProblem, GradMode, TrainConfig};
use cvqd_core::ExecMode;

fn bench_modes(crit: &mut Criterion) {
    let base = TrainConfig { layers: 4, ..TrainConfig::desk_generative() };
    let cd = base.cutoff_dim().unwrap();
    let target = make_coherent(c(1.0), cd).to_density();
    let problem = GenerativeProblem::new(&target, &base).unwrap();
    let terms = problem.batch(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let theta = param_init(base.layers, 0.1, 1).unwrap();

    let mut group = crit.benchmark_group("batch_gradient");
    group.sample_size(10);
    for grad in [GradMode::Analytic, GradMode::CentralFd] {
        for exec in [ExecMode::Sequential, ExecMode::Parallel] {
            let cfg = TrainConfig { grad_mode: grad, exec, ..base.clone() };
            let id = BenchmarkId::new(format!("{grad:?}"), format!("{exec:?}"));
            group.bench_with_input(id, &cfg, |b, cfg| {
                b.iter(|| batch_gradient(&theta, &terms, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_modes);
criterion_main!(benches);
