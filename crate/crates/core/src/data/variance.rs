use serde::{Deserialize, Serialize};

use super::PromptRecord;
use crate::error::{Error, Result};
use crate::par;
use crate::reward::{reward_score, RewardParams};
use crate::rng;
use crate::stats;
use crate::tinylm::{sample_top_p, ModelParams, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceFilterConfig {
    /// Responses sampled per prompt.
    pub k: usize,
    /// Prompts whose reward variance falls below this are dropped.
    pub epsilon: f64,
    pub top_p: f64,
    pub max_new: usize,
}

impl Default for VarianceFilterConfig {
    fn default() -> Self {
        VarianceFilterConfig { k: 4, epsilon: 1e-3, top_p: 0.9, max_new: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptVariance {
    pub id: u64,
    pub responses: Vec<TokenSeq>,
    pub rewards: Vec<f64>,
    pub variance: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceFilterOutput {
    pub kept: Vec<PromptRecord>,
    pub report: Vec<PromptVariance>,
}

/// Samples `k` responses per prompt, scores them, and keeps prompts whose
/// unbiased reward variance is at least `epsilon`. Each prompt draws from
/// its own generator keyed by prompt id.
pub fn variance_filter(
    prompts: &[PromptRecord],
    policy: &ModelParams,
    reward: &RewardParams,
    cfg: &VarianceFilterConfig,
    seed: u64,
) -> Result<VarianceFilterOutput> {
    if cfg.k < 2 {
        return Err(Error::InvalidArgument(format!("variance filter needs k >= 2, got {}", cfg.k)));
    }
    let report = par::try_map(prompts, |_, rec| {
        let mut r = rng::child(seed, rng::stream::VARIANCE, rec.id);
        let mut responses = Vec::with_capacity(cfg.k);
        let mut rewards = Vec::with_capacity(cfg.k);
        for _ in 0..cfg.k {
            let y = sample_top_p(policy, &rec.prompt, cfg.top_p, cfg.max_new, &mut r)?;
            rewards.push(reward_score(reward, &rec.prompt, &y)?);
            responses.push(y);
        }
        let variance = stats::sample_variance(&rewards)?;
        Ok::<_, Error>(PromptVariance { id: rec.id, responses, rewards, variance, kept: variance >= cfg.epsilon })
    })?;
    let kept = prompts.iter().zip(&report).filter(|(_, v)| v.kept).map(|(p, _)| p.clone()).collect();
    Ok(VarianceFilterOutput { kept, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{init_params, ModelConfig};

    fn prompts(n: usize) -> Vec<PromptRecord> {
        (0..n).map(|i| PromptRecord::new(i as u64, TokenSeq(vec![4 + (i % 7) as u32, 44]), "t")).collect()
    }

    #[test]
    fn constant_rewards_are_dropped() {
        let policy = init_params(ModelConfig::default(), 1).unwrap();
        let zero_rm = RewardParams::zeros(ModelConfig::default());
        let cfg = VarianceFilterConfig { epsilon: 1e-9, ..Default::default() };
        let out = variance_filter(&prompts(10), &policy, &zero_rm, &cfg, 3).unwrap();
        assert!(out.kept.is_empty());
        assert!(out.report.iter().all(|v| v.variance == 0.0));
    }

    #[test]
    fn zero_epsilon_keeps_everything() {
        let policy = init_params(ModelConfig::default(), 1).unwrap();
        let rm = RewardParams::from_trunk(&policy, 2);
        let cfg = VarianceFilterConfig { epsilon: 0.0, ..Default::default() };
        let ps = prompts(12);
        let out = variance_filter(&ps, &policy, &rm, &cfg, 3).unwrap();
        assert_eq!(out.kept, ps);
    }

    #[test]
    fn k_below_two_rejected() {
        let policy = init_params(ModelConfig::default(), 1).unwrap();
        let rm = RewardParams::zeros(ModelConfig::default());
        let cfg = VarianceFilterConfig { k: 1, ..Default::default() };
        assert!(variance_filter(&prompts(1), &policy, &rm, &cfg, 0).is_err());
    }

    #[test]
    fn serial_and_parallel_agree() {
        let policy = init_params(ModelConfig::default(), 6).unwrap();
        let rm = RewardParams::from_trunk(&policy, 6);
        let ps = prompts(40);
        let cfg = VarianceFilterConfig { epsilon: 0.01, ..Default::default() };
        let a = par::with_threads(1, || variance_filter(&ps, &policy, &rm, &cfg, 9).unwrap());
        let b = par::with_threads(4, || variance_filter(&ps, &policy, &rm, &cfg, 9).unwrap());
        assert_eq!(a, b);
    }
}
