//! A small corpus driven through every stage, with artifacts round-tripped
//! through their file formats in between.

use rlhf_core::data::io::{read_jsonl, write_jsonl};
use rlhf_core::data::{
    assign_buckets, balance_buckets, filter_prompts, gen_synthetic_corpus, long_win_counts, BucketSpec, CorpusPlan,
    PreferencePair, RuleSet, TaskSpec,
};
use rlhf_core::eval::{export_curves, mean_oracle_reward, win_rate_table};
use rlhf_core::offline::{construct_dpo_pairs, dpo_train, rft_select, rft_train, DpoConfig};
use rlhf_core::ppo::{metrics_to_csv, ppo_train, PpoConfig, RetentionSet};
use rlhf_core::reward::{train_reward_model, RewardParams, RewardTrainConfig};
use rlhf_core::tinylm::{init_params, train_nll, Checkpoint, NllTrainConfig};
use rlhf_core::{ModelConfig, ModelParams};

#[test]
fn stages_compose_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let task = TaskSpec::default();
    let plan = CorpusPlan { sft: 600, prompts: 64, pairs: 400, eval_prompts: 32, ..Default::default() };
    let c = gen_synthetic_corpus(&task, &plan, 11).unwrap();

    let pairs_path = dir.path().join("pairs.jsonl");
    write_jsonl(&pairs_path, &c.pairs).unwrap();
    let pairs: Vec<PreferencePair> = read_jsonl(&pairs_path).unwrap();
    assert_eq!(pairs, c.pairs);

    let prompts = filter_prompts(&c.prompts, &RuleSet::default(), 2);
    assert!(!prompts.is_empty() && prompts.len() < c.prompts.len());
    let balanced = balance_buckets(&assign_buckets(&pairs, BucketSpec::new(4).unwrap()).unwrap(), 3);
    for b in assign_buckets(&balanced, BucketSpec::new(4).unwrap()).unwrap().buckets.values() {
        let (l, s) = long_win_counts(b);
        assert_eq!(l, s);
    }

    let sft_data: Vec<_> = c.sft.iter().map(|r| r.pair()).collect();
    let init = init_params(ModelConfig::default(), 12).unwrap();
    let (sft, curve) =
        train_nll(&init, &sft_data, &NllTrainConfig { lr: 1e-2, epochs: 3, batch_size: 32, seed: 12 }).unwrap();
    assert!(curve.last().unwrap().loss < curve[0].loss);

    let ck_path = dir.path().join("sft.ckpt");
    sft.to_checkpoint("sft", 12).unwrap().save(&ck_path).unwrap();
    let sft = ModelParams::from_checkpoint(&Checkpoint::load(&ck_path).unwrap()).unwrap();

    let (rm, rcurve) =
        train_reward_model(&sft, &balanced, &[], &RewardTrainConfig { epochs: 3, seed: 13, ..Default::default() })
            .unwrap();
    assert!(rcurve.last().unwrap().loss < rcurve[0].loss);
    let rm_path = dir.path().join("rm.ckpt");
    rm.to_checkpoint("rm", 13).unwrap().save(&rm_path).unwrap();
    let rm = RewardParams::from_checkpoint(&Checkpoint::load(&rm_path).unwrap()).unwrap();
    assert!(ModelParams::from_checkpoint(&Checkpoint::load(&rm_path).unwrap()).is_err());

    let retention = RetentionSet { pairs: c.retention.iter().map(|r| r.pair()).collect() };
    let cfg = PpoConfig { iterations: 5, prompts_per_iter: 32, seed: 14, ..Default::default() };
    let out = ppo_train(&sft, &rm, &prompts, &retention, &cfg).unwrap();
    assert_eq!(out.metrics.len(), 5);
    assert_eq!(out.reference.as_ref().unwrap().entries.len(), prompts.len());
    let svgs = export_curves(&metrics_to_csv(&out.metrics)).unwrap();
    assert_eq!(svgs.len(), 2);
    assert!(svgs.iter().all(|(_, s)| s.starts_with("<svg")));

    let dcfg = DpoConfig { epochs: 2, seed: 15, ..Default::default() };
    let dpairs = construct_dpo_pairs(&prompts, &sft, &rm, &dcfg).unwrap();
    let (dpo, dcurve) = dpo_train(&sft, &dpairs, &[], &dcfg).unwrap();
    assert_eq!(dcurve.len(), 3);

    let selected = rft_select(&prompts, &sft, &rm, 4, 0.9, 8, 16).unwrap();
    assert_eq!(selected.len(), prompts.len());
    let (rft, _) = rft_train(&sft, &selected, &NllTrainConfig { epochs: 1, seed: 16, ..Default::default() }).unwrap();

    for m in [&out.policy, &dpo, &rft] {
        let rep = win_rate_table(m, &sft, &c.eval_prompts, &task, 8, 0.05).unwrap();
        let o = &rep.overall;
        assert!((o.win + o.tie + o.loss - 1.0).abs() < 1e-12);
        assert!(mean_oracle_reward(m, &c.eval_prompts, &task, 8).unwrap().is_finite());
    }
}
