use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dzgt::gt_core::{gradients, Init, RunConfig, SwarmState};
use dzgt::harness::{parse_plan, run_experiment};
use dzgt::problems::{bilevel_benchmark, estimate_implicit_objective, LowerEval, ObjectiveEval, Stage};
use dzgt::Execution;

const POLICIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn agent_gradients(c: &mut Criterion) {
    let problem = bilevel_benchmark();
    let mut group = c.benchmark_group("gradients_m20");
    for (name, exec) in POLICIES {
        let mut cfg = RunConfig::new(Stage::SingleStage, 1e-4, 0.1, 100);
        cfg.minibatch = 5;
        cfg.execution = exec;
        cfg.init = Init::Random { center: None, scale: 0.5 };
        let mut state = SwarmState::initial(&problem, 20, &cfg).unwrap();
        state.iteration = 10;
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(gradients(&state, &problem, &cfg).unwrap()))
        });
    }
    group.finish();
}

fn objective(c: &mut Criterion) {
    let problem = bilevel_benchmark();
    let mut group = c.benchmark_group("objective_estimate");
    for (name, exec) in POLICIES {
        let mut eval = ObjectiveEval::new(&problem, 20, 50, LowerEval::Iterative(150), 1);
        eval.exec = exec;
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(estimate_implicit_objective(&problem, &[0.1, -0.2], &eval).unwrap()))
        });
    }
    group.finish();
}

fn experiment(c: &mut Criterion) {
    let base = parse_plan(
        "problem = \"cournot\"\np_followers = 5\nm = 10\ngamma = 1e-4\neta = 0.1\nK = 20\nepochs = 2\n\
         sample_paths = 2\neval_samples = 10\ntopologies = [\"ring\", \"complete\"]\n",
    )
    .unwrap();
    let mut group = c.benchmark_group("small_experiment");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        let mut plan = base.clone();
        plan.run.execution = exec;
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(run_experiment(&plan).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, agent_gradients, objective, experiment);
criterion_main!(benches);
