use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rlhf_core::data::{gen_synthetic_corpus, CorpusPlan, TaskSpec};
use rlhf_core::par;
use rlhf_core::ppo::generate_rollouts;
use rlhf_core::reward::{rm_loss_and_grad, RewardParams};
use rlhf_core::tinylm::{init_params, nll_loss_and_grad};
use rlhf_core::ModelConfig;

/// Serial, and one worker per core (at least two).
fn thread_counts() -> [usize; 2] {
    [1, std::thread::available_parallelism().map_or(2, |n| n.get().max(2))]
}

fn bench_parallel(c: &mut Criterion) {
    let plan = CorpusPlan { sft: 512, prompts: 256, pairs: 512, ..Default::default() };
    let corpus = gen_synthetic_corpus(&TaskSpec::default(), &plan, 1).unwrap();
    let policy = init_params(ModelConfig::default(), 1).unwrap();
    let rm = RewardParams::from_trunk(&policy, 2);
    let sft: Vec<_> = corpus.sft.iter().map(|r| r.pair()).collect();

    let mut g = c.benchmark_group("nll_grad");
    for t in thread_counts() {
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            par::with_threads(t, || b.iter(|| black_box(nll_loss_and_grad(&policy, &sft).unwrap())))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("rm_grad");
    for t in thread_counts() {
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            par::with_threads(t, || b.iter(|| black_box(rm_loss_and_grad(&rm, &corpus.pairs, 0.01).unwrap())))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("rollouts");
    for t in thread_counts() {
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            par::with_threads(t, || {
                b.iter(|| black_box(generate_rollouts(&policy, &policy, &corpus.prompts, 0.9, 8, 3).unwrap()))
            })
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_parallel
}
criterion_main!(benches);
