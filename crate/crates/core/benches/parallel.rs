//! Parallel fan-out vs sequential baseline for group rollouts and batch
//! reward scoring.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use vrag_core::chat::DecodingParams;
use vrag_core::retrieval::{generate_synthetic_corpus, SimulatedRetriever, SyntheticCorpusSpec};
use vrag_core::reward::{score_batch, RewardWeights};
use vrag_core::rollout::{
    rollout, rollout_group, rollout_group_sequential, EnvironmentBundle, ScriptedPolicy,
};
use vrag_core::trajectory::RolloutConfig;

fn bench_rollout_group(c: &mut Criterion) {
    let spec = SyntheticCorpusSpec {
        num_docs: 16,
        num_tasks: 4,
        page_width: 320,
        page_height: 240,
        ..Default::default()
    };
    let (corpus, tasks) = generate_synthetic_corpus(&spec);
    let corpus = Arc::new(corpus);
    let env = EnvironmentBundle::new(Arc::new(SimulatedRetriever {
        corpus: corpus.clone(),
        seed: 0,
    }));
    let task = &tasks[0];
    let policy = ScriptedPolicy::oracle(task, &corpus);
    let config = RolloutConfig::default();
    let params = DecodingParams::default();

    let mut group = c.benchmark_group("rollout_group");
    for &size in &[4usize, 16] {
        group.bench_with_input(BenchmarkId::new("parallel", size), &size, |b, &size| {
            b.iter(|| rollout_group(task, &policy, &env, &config, &params, size, 0));
        });
        group.bench_with_input(BenchmarkId::new("sequential", size), &size, |b, &size| {
            b.iter(|| rollout_group_sequential(task, &policy, &env, &config, &params, size, 0));
        });
    }
    group.finish();
}

fn bench_score_batch(c: &mut Criterion) {
    let spec = SyntheticCorpusSpec {
        num_docs: 16,
        num_tasks: 8,
        page_width: 64,
        page_height: 48,
        ..Default::default()
    };
    let (corpus, tasks) = generate_synthetic_corpus(&spec);
    let corpus = Arc::new(corpus);
    let env = EnvironmentBundle::new(Arc::new(SimulatedRetriever {
        corpus: corpus.clone(),
        seed: 0,
    }));
    let config = RolloutConfig::default();
    let params = DecodingParams::default();
    let rollouts: Vec<_> = tasks
        .iter()
        .flat_map(|task| {
            let policy = ScriptedPolicy::oracle(task, &corpus);
            (0..8)
                .map(|i| (rollout(task, &policy, &env, &config, &params, i), task))
                .collect::<Vec<_>>()
        })
        .collect();
    let pairs: Vec<_> = rollouts.iter().map(|(t, task)| (t, *task)).collect();

    struct InstantJudge;
    impl vrag_core::reward::JudgeClient for InstantJudge {
        fn evaluate(
            &self,
            _: &str,
            _: &str,
            _: &str,
        ) -> Result<String, vrag_core::chat::ChatError> {
            Ok("<judge>True</judge>".to_string())
        }
    }

    let weights = RewardWeights::post_sft();
    c.bench_function("score_batch/parallel_feature", |b| {
        b.iter(|| score_batch(&pairs, &InstantJudge, &weights));
    });
}

criterion_group!(benches, bench_rollout_group, bench_score_batch);
criterion_main!(benches);
