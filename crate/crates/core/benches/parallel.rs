//! Sequential vs. parallel execution of the heavy paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ope_core::correction::{correct_mc_seeded, BvnSampler};
use ope_core::estimators::{EstimatorKind, Evaluation, FixedTargetPolicy, PositionBiasCurve, PropensitySource};
use ope_core::harness::default_estimators;
use ope_core::par::Execution;
use ope_core::ranking::Ranking;
use ope_core::rules::{PinRule, RuleSet};
use ope_core::simulator::{simulate, SimulationConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn pinned_config(n_rankings: usize) -> SimulationConfig {
    SimulationConfig {
        n_rankings,
        ruleset: RuleSet::new(vec![PinRule::new(0, 1, 0.95).unwrap()]).unwrap(),
        ..SimulationConfig::default()
    }
}

fn bench_simulate(c: &mut Criterion) {
    let cfg = pinned_config(20_000);
    let mut group = c.benchmark_group("simulate_20k");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| simulate(&cfg, exec).unwrap()));
    }
    group.finish();
}

fn bench_estimate(c: &mut Criterion) {
    let cfg = pinned_config(20_000);
    let sim = simulate(&cfg, Execution::Parallel).unwrap();
    let registry = sim.registry();
    let target = FixedTargetPolicy::new(10, vec![7, 0, 3, 1], vec![2, 4]).unwrap();
    let curve = PositionBiasCurve::inverse_rank(10);
    let kinds: Vec<EstimatorKind> = default_estimators();
    let mut group = c.benchmark_group("estimate_corrected_20k");
    group.sample_size(20);
    for (name, exec) in MODES {
        let mut eval = Evaluation::new(&registry);
        eval.propensity = PropensitySource::CorrectedStochastic;
        eval.curve = Some(&curve);
        eval.exec = exec;
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| eval.estimate_all(&sim.logs, &target, &kinds).unwrap())
        });
    }
    group.finish();
}

fn bench_monte_carlo(c: &mut Criterion) {
    let cfg = pinned_config(1);
    let d = cfg.decomposition().unwrap();
    let base = Ranking::new(vec![3, 8, 0, 5, 1, 9, 2, 7, 4, 6]).unwrap();
    let sampler = BvnSampler {
        base: &base,
        decomposition: &d,
    };
    let mut group = c.benchmark_group("correct_mc_262k");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| correct_mc_seeded(&sampler, &cfg.ruleset, 1 << 18, 1, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_simulate, bench_estimate, bench_monte_carlo);
criterion_main!(benches);
