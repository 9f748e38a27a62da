//! Serial and multi-threaded runs must agree bit for bit.

use rlhf_core::data::{gen_synthetic_corpus, variance_filter, CorpusPlan, TaskSpec, VarianceFilterConfig};
use rlhf_core::offline::{construct_dpo_pairs, DpoConfig};
use rlhf_core::par::with_threads;
use rlhf_core::ppo::{generate_rollouts, ppo_train, PpoConfig, RetentionSet};
use rlhf_core::reward::{train_reward_model, RewardParams, RewardTrainConfig};
use rlhf_core::tinylm::{init_params, nll_loss_and_grad};
use rlhf_core::ModelConfig;

fn both<R: PartialEq + std::fmt::Debug + Send>(f: impl Fn() -> R + Sync) {
    let a = with_threads(1, &f);
    let b = with_threads(4, &f);
    assert_eq!(a, b);
}

#[test]
fn batched_work_is_thread_count_invariant() {
    let plan = CorpusPlan { sft: 120, prompts: 40, pairs: 120, eval_prompts: 8, ..Default::default() };
    let c = gen_synthetic_corpus(&TaskSpec::default(), &plan, 5).unwrap();
    let policy = init_params(ModelConfig::default(), 5).unwrap();
    let rm = RewardParams::from_trunk(&policy, 6);
    let sft: Vec<_> = c.sft.iter().map(|r| r.pair()).collect();

    both(|| nll_loss_and_grad(&policy, &sft).unwrap());
    both(|| generate_rollouts(&policy, &policy, &c.prompts, 0.9, 8, 7).unwrap());
    both(|| variance_filter(&c.prompts, &policy, &rm, &VarianceFilterConfig::default(), 8).unwrap().report);
    both(|| construct_dpo_pairs(&c.prompts, &policy, &rm, &DpoConfig { margin: 0.0, ..Default::default() }).unwrap());
    both(|| {
        let cfg = RewardTrainConfig { epochs: 2, seed: 9, ..Default::default() };
        train_reward_model(&policy, &c.pairs, &[], &cfg).unwrap().0.data
    });
    both(|| {
        let cfg = PpoConfig { iterations: 3, prompts_per_iter: 16, seed: 10, ..Default::default() };
        let retention = RetentionSet { pairs: sft[..4].to_vec() };
        let out = ppo_train(&policy, &rm, &c.prompts, &retention, &cfg).unwrap();
        (out.policy.data, out.critic.data, out.metrics)
    });
}
