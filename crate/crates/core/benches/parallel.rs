//! Sequential versus data-parallel execution of the hot paths. Without the
//! `parallel` feature both variants run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msfa::exec::Parallelism;
use msfa::linalg::{random_orthogonal, standard_normal_matrix};
use msfa::postprocess::{estimate_covariances, op_align, OpOptions};
use msfa::sampler::{chain_rng, run_chain, run_chains, ChainDraws, PriorHyperparams, SamplerConfig};
use msfa::simgen::{generate_data, generate_truth, scenario, Scale};
use nalgebra::DMatrix;

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn desk_draws() -> ChainDraws {
    let spec = scenario(1, Scale::Desk).unwrap();
    let data = generate_data(&generate_truth(&spec).unwrap(), &spec, 1).unwrap();
    let cfg = SamplerConfig { n_iter: 600, burn_in: 100, ..SamplerConfig::new(spec.p, data.len()) };
    run_chain(&data, &PriorHyperparams::defaults(data.len()), &cfg).unwrap()
}

fn bench_op_align(c: &mut Criterion) {
    let mut rng = chain_rng(1, 0);
    let phi0 = standard_normal_matrix(200, 8, &mut rng);
    let draws: Vec<DMatrix<f64>> = (0..2000).map(|_| &phi0 * random_orthogonal(8, &mut rng)).collect();
    let refs: Vec<&DMatrix<f64>> = draws.iter().collect();
    let opts = OpOptions { max_iters: 3, tol: 0.0, keep_rotations: false };
    let mut g = c.benchmark_group("op_align_p200_k8_r2000");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| op_align(black_box(&refs), &draws[0], &opts, mode).unwrap())
        });
    }
    g.finish();
}

fn bench_estimate(c: &mut Criterion) {
    let draws = desk_draws();
    let mut g = c.benchmark_group("estimate_covariances_desk_r500");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| estimate_covariances(black_box(&draws), mode).unwrap())
        });
    }
    g.finish();
}

fn bench_sampler(c: &mut Criterion) {
    let spec = scenario(4, Scale::Desk).unwrap();
    let data = generate_data(&generate_truth(&spec).unwrap(), &spec, 1).unwrap();
    let hyper = PriorHyperparams::defaults(data.len());
    let mut g = c.benchmark_group("run_chains_scenario4_desk_4x50");
    g.sample_size(10);
    for (name, mode) in MODES {
        let cfg = SamplerConfig {
            n_iter: 50,
            burn_in: 10,
            n_chains: 4,
            parallelism: mode,
            ..SamplerConfig::new(spec.p, data.len())
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_chains(black_box(&data), &hyper, &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_op_align, bench_estimate, bench_sampler);
criterion_main!(benches);
