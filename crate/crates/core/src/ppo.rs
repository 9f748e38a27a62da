//! Online PPO with KL-shaped, reference-baselined rewards, a learned critic
//! and a supervised retention term.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PromptRecord;
use crate::error::{Error, Result};
use crate::par;
use crate::reward::{reward_score, RewardParams, ScalarHeadModel};
use crate::rng;
use crate::tinylm::model::SeqForward;
use crate::tinylm::{
    adam_step, greedy_decode, mean_nll, nll_loss_and_grad, sample_top_p, token_logprobs, ModelParams, OptimizerState,
    TokenSeq,
};

pub type CriticParams = ScalarHeadModel;

/// Weight of the value loss in the total PPO loss.
pub const VALUE_COEF: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub beta_kl: f64,
    pub c_sft: f64,
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lr: f64,
    pub iterations: usize,
    pub prompts_per_iter: usize,
    /// Minibatches per optimization pass over one batch of rollouts.
    pub minibatches: usize,
    pub top_p: f64,
    pub max_new: usize,
    pub use_reference: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            beta_kl: 0.05,
            c_sft: 0.1,
            clip_eps: 0.2,
            gamma: 1.0,
            gae_lambda: 0.95,
            lr: 1e-3,
            iterations: 200,
            prompts_per_iter: 64,
            minibatches: 4,
            top_p: 0.9,
            max_new: 8,
            use_reference: true,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.beta_kl >= 0.0) {
            return bad("beta_kl must be non-negative");
        }
        if !(self.c_sft >= 0.0) {
            return bad("c_sft must be non-negative");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must be in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0, 1]");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.prompts_per_iter == 0 || self.minibatches == 0 {
            return bad("prompts_per_iter and minibatches must be positive");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub y_ref: TokenSeq,
    pub r_ref: f64,
}

/// Greedy reference response and its cached reward, per prompt id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub entries: BTreeMap<u64, ReferenceEntry>,
}

impl ReferenceTable {
    pub fn get(&self, id: u64) -> Result<&ReferenceEntry> {
        self.entries.get(&id).ok_or(Error::MissingReference(id))
    }
}

pub fn build_reference_table(
    prompts: &[PromptRecord],
    sft: &ModelParams,
    rm: &RewardParams,
    max_new: usize,
) -> Result<ReferenceTable> {
    let rows = par::try_map(prompts, |_, p| {
        let y_ref = greedy_decode(sft, &p.prompt, max_new)?;
        let r_ref = reward_score(rm, &p.prompt, &y_ref)?;
        Ok::<_, Error>((p.id, ReferenceEntry { y_ref, r_ref }))
    })?;
    Ok(ReferenceTable { entries: rows.into_iter().collect() })
}

/// One sampled response with its per-token tracks. Every per-token vector
/// covers the response plus its EOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt_id: u64,
    pub prompt: TokenSeq,
    pub response: TokenSeq,
    pub logp_behavior: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub raw_reward: f64,
}

impl RolloutRecord {
    pub fn num_tokens(&self) -> usize {
        self.logp_behavior.len()
    }

    /// `log π_θ(y|x) - log π_0(y|x)` at sampling time.
    pub fn sequence_kl(&self) -> f64 {
        self.logp_behavior.iter().sum::<f64>() - self.logp_ref.iter().sum::<f64>()
    }
}

/// Supervised pairs kept in view during PPO to limit forgetting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetentionSet {
    pub pairs: Vec<(TokenSeq, TokenSeq)>,
}

/// Samples one response per prompt. Record `i` draws from
/// `child(seed, ROLLOUT, i)`, so the result does not depend on threading.
pub fn generate_rollouts(
    policy: &ModelParams,
    ref_policy: &ModelParams,
    prompts: &[PromptRecord],
    top_p: f64,
    max_new: usize,
    seed: u64,
) -> Result<Vec<RolloutRecord>> {
    par::try_map(prompts, |i, p| {
        let mut r = rng::child(seed, rng::stream::ROLLOUT, i as u64);
        let response = sample_top_p(policy, &p.prompt, top_p, max_new, &mut r)?;
        let logp_behavior = token_logprobs(policy, &p.prompt, &response)?;
        let logp_ref = token_logprobs(ref_policy, &p.prompt, &response)?;
        Ok::<_, Error>(RolloutRecord {
            prompt_id: p.id,
            prompt: p.prompt.clone(),
            response,
            logp_behavior,
            logp_ref,
            rewards: Vec::new(),
            values: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
            raw_reward: 0.0,
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapedRewards {
    pub per_token: Vec<f64>,
    pub raw_reward: f64,
    /// Zero when no reference table is used.
    pub ref_reward: f64,
}

impl ShapedRewards {
    pub fn total(&self) -> f64 {
        self.per_token.iter().sum()
    }
}

/// Per-token `-β (log π_θ - log π_0)`, with `r(x, y) - r_ref` added on the
/// final token. Without a table the baseline is zero.
pub fn shape_rewards(
    record: &RolloutRecord,
    rm: &RewardParams,
    ref_table: Option<&ReferenceTable>,
    beta_kl: f64,
) -> Result<ShapedRewards> {
    if record.logp_behavior.len() != record.logp_ref.len() || record.logp_behavior.is_empty() {
        return Err(Error::ShapeMismatch("rollout log-prob tracks".into()));
    }
    let ref_reward = match ref_table {
        Some(t) => t.get(record.prompt_id)?.r_ref,
        None => 0.0,
    };
    let raw_reward = reward_score(rm, &record.prompt, &record.response)?;
    let mut per_token: Vec<f64> =
        record.logp_behavior.iter().zip(&record.logp_ref).map(|(a, b)| -beta_kl * (a - b)).collect();
    *per_token.last_mut().unwrap() += raw_reward - ref_reward;
    Ok(ShapedRewards { per_token, raw_reward, ref_reward })
}

/// Generalized advantage estimation with a zero terminal bootstrap.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::ShapeMismatch(format!("{} rewards vs {} values", rewards.len(), values.len())));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Critic value at the state before each response token (and before EOS).
pub fn critic_values(critic: &CriticParams, prompt: &[u32], response: &[u32]) -> Result<Vec<f64>> {
    let cfg = &critic.config;
    let full = cfg.full_sequence(prompt, response)?;
    let trunk = critic.trunk();
    Ok((prompt.len()..full.len())
        .map(|pos| critic.head_value(&trunk.hidden(&crate::tinylm::context_at(cfg.context_window, &full[..pos]))))
        .collect())
}

/// Fills rewards, values, advantages and returns in place.
pub fn annotate_rollout(
    record: &mut RolloutRecord,
    rm: &RewardParams,
    critic: &CriticParams,
    ref_table: Option<&ReferenceTable>,
    cfg: &PpoConfig,
) -> Result<()> {
    let shaped = shape_rewards(record, rm, ref_table, cfg.beta_kl)?;
    let values = critic_values(critic, &record.prompt, &record.response)?;
    let (adv, ret) = gae_advantages(&shaped.per_token, &values, cfg.gamma, cfg.gae_lambda)?;
    record.rewards = shaped.per_token;
    record.raw_reward = shaped.raw_reward;
    record.values = values;
    record.advantages = adv;
    record.returns = ret;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoLoss {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub policy_grad: Vec<f64>,
    pub critic_grad: Vec<f64>,
}

/// Clipped surrogate plus `VALUE_COEF` times the squared value error, both
/// averaged over all tokens in `records`.
pub fn ppo_loss_and_grad(
    policy: &ModelParams,
    critic: &CriticParams,
    records: &[RolloutRecord],
    clip_eps: f64,
) -> Result<PpoLoss> {
    let tokens: usize = records.iter().map(RolloutRecord::num_tokens).sum();
    if tokens == 0 {
        return Err(Error::Empty("ppo batch".into()));
    }
    let inv_n = 1.0 / tokens as f64;
    let pt = policy.trunk();
    let ct = critic.trunk();
    let (np, nc) = (policy.data.len(), critic.data.len());
    let parts = par::try_map(records, |i, rec| {
        let n = rec.num_tokens();
        if rec.advantages.len() != n || rec.returns.len() != n {
            return Err(Error::ShapeMismatch(format!("record {i} is not annotated")));
        }
        let fwd = SeqForward::run(pt, &rec.prompt, &rec.response)?;
        let logp = fwd.token_logprobs();
        let mut pl = 0.0;
        let mut weights = vec![0.0; n];
        for t in 0..n {
            let ratio = (logp[t] - rec.logp_behavior[t]).exp();
            if !ratio.is_finite() {
                return Err(Error::NonFinite(format!("ppo ratio in record {i}")));
            }
            let a = rec.advantages[t];
            let unclipped = ratio * a;
            let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
            if unclipped <= clipped {
                pl -= unclipped;
                weights[t] = -unclipped * inv_n;
            } else {
                pl -= clipped;
            }
        }
        let mut pg = vec![0.0; np];
        fwd.backward(pt, &weights, &mut pg);
        let mut vl = 0.0;
        let mut cg = vec![0.0; nc];
        for t in 0..n {
            let h = ct.hidden(&fwd.contexts[t]);
            let err = critic.head_value(&h) - rec.returns[t];
            vl += err * err;
            critic.backward_head(&fwd.contexts[t], &h, VALUE_COEF * 2.0 * err * inv_n, &mut cg);
        }
        Ok((pl, vl, pg, cg))
    })?;
    let mut out = PpoLoss {
        total: 0.0,
        policy_loss: 0.0,
        value_loss: 0.0,
        policy_grad: vec![0.0; np],
        critic_grad: vec![0.0; nc],
    };
    for (pl, vl, pg, cg) in &parts {
        out.policy_loss += pl;
        out.value_loss += vl;
        out.policy_grad.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
        out.critic_grad.iter_mut().zip(cg).for_each(|(a, b)| *a += b);
    }
    out.policy_loss *= inv_n;
    out.value_loss *= inv_n;
    out.total = out.policy_loss + VALUE_COEF * out.value_loss;
    Ok(out)
}

/// Mean NLL over the retention pairs and its gradient.
pub fn sft_regularizer(policy: &ModelParams, retention: &RetentionSet) -> Result<(f64, Vec<f64>)> {
    if retention.pairs.is_empty() {
        return Err(Error::Empty("retention set".into()));
    }
    nll_loss_and_grad(policy, &retention.pairs)
}

/// Monte Carlo `E_{y ~ π_θ}[log π_θ(y|x) - log π_0(y|x)]` with untruncated
/// sampling.
pub fn estimate_kl(
    policy: &ModelParams,
    ref_policy: &ModelParams,
    prompts: &[PromptRecord],
    samples_per_prompt: usize,
    max_new: usize,
    seed: u64,
) -> Result<f64> {
    if samples_per_prompt == 0 {
        return Err(Error::InvalidArgument("samples_per_prompt must be at least 1".into()));
    }
    if prompts.is_empty() {
        return Err(Error::Empty("kl prompts".into()));
    }
    let per = par::try_map(prompts, |i, p| {
        let mut r = rng::child(seed, rng::stream::KL, i as u64);
        let mut acc = 0.0;
        for _ in 0..samples_per_prompt {
            let y = sample_top_p(policy, &p.prompt, 1.0, max_new, &mut r)?;
            let a: f64 = token_logprobs(policy, &p.prompt, &y)?.iter().sum();
            let b: f64 = token_logprobs(ref_policy, &p.prompt, &y)?.iter().sum();
            acc += a - b;
        }
        Ok::<_, Error>(acc)
    })?;
    Ok(per.iter().sum::<f64>() / (prompts.len() * samples_per_prompt) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PpoMetrics {
    pub iter: usize,
    pub mean_shaped_reward: f64,
    pub mean_raw_reward: f64,
    pub est_kl: f64,
    pub mean_len: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub retention_nll: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "iter,mean_shaped_reward,mean_raw_reward,est_kl,mean_len,policy_loss,value_loss,retention_nll";

pub fn metrics_to_csv(metrics: &[PpoMetrics]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for m in metrics {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.iter,
            m.mean_shaped_reward,
            m.mean_raw_reward,
            m.est_kl,
            m.mean_len,
            m.policy_loss,
            m.value_loss,
            m.retention_nll
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct PpoOutcome {
    pub policy: ModelParams,
    pub critic: CriticParams,
    pub reference: Option<ReferenceTable>,
    pub metrics: Vec<PpoMetrics>,
}

fn diverged(iteration: usize, what: impl Into<String>) -> Error {
    Error::Divergence { iteration, what: what.into() }
}

/// Full PPO loop. Each iteration samples a batch of prompts, rolls out,
/// shapes and annotates, then makes one pass over the rollouts in
/// `minibatches` Adam steps. Metrics describe the rollouts of that
/// iteration, i.e. the policy before its update.
pub fn ppo_train(
    sft: &ModelParams,
    rm: &RewardParams,
    prompts: &[PromptRecord],
    retention: &RetentionSet,
    cfg: &PpoConfig,
) -> Result<PpoOutcome> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Empty("ppo prompts".into()));
    }
    if cfg.c_sft > 0.0 && retention.pairs.is_empty() {
        return Err(Error::Empty("retention set is required when c_sft > 0".into()));
    }
    if rm.config != sft.config {
        return Err(Error::ShapeMismatch("reward model and policy configs differ".into()));
    }
    let mut policy = sft.clone();
    let mut critic = CriticParams::with_zero_head(&ModelParams {
        config: rm.config,
        data: rm.data[..rm.config.num_params()].to_vec(),
    });
    let reference = if cfg.use_reference { Some(build_reference_table(prompts, sft, rm, cfg.max_new)?) } else { None };
    let mut popt = OptimizerState::new(policy.data.len(), cfg.lr);
    let mut copt = OptimizerState::new(critic.data.len(), cfg.lr);

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut pass = 0u64;
    let mut metrics = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.prompts_per_iter);
        while batch.len() < cfg.prompts_per_iter {
            if cursor == order.len() {
                order = (0..prompts.len()).collect();
                order.shuffle(&mut rng::child(cfg.seed, rng::stream::PROMPT_ORDER, pass));
                pass += 1;
                cursor = 0;
            }
            batch.push(prompts[order[cursor]].clone());
            cursor += 1;
        }
        let iter_seed = rng::derive_seed(cfg.seed, rng::stream::ROLLOUT, it as u64);
        let mut rollouts = generate_rollouts(&policy, sft, &batch, cfg.top_p, cfg.max_new, iter_seed)?;
        let annotated = par::try_map(&rollouts, |_, r| {
            let mut r = r.clone();
            annotate_rollout(&mut r, rm, &critic, reference.as_ref(), cfg)?;
            Ok::<_, Error>(r)
        })?;
        rollouts = annotated;

        let nb = rollouts.len() as f64;
        let mean_shaped = rollouts.iter().map(|r| r.rewards.iter().sum::<f64>()).sum::<f64>() / nb;
        let mean_raw = rollouts.iter().map(|r| r.raw_reward).sum::<f64>() / nb;
        let est_kl = rollouts.iter().map(RolloutRecord::sequence_kl).sum::<f64>() / nb;
        let mean_len = rollouts.iter().map(|r| r.response.len() as f64).sum::<f64>() / nb;
        let retention_nll = if retention.pairs.is_empty() { 0.0 } else { mean_nll(&policy, &retention.pairs)? };
        if ![mean_shaped, mean_raw, est_kl].iter().all(|v| v.is_finite()) {
            return Err(diverged(it, "rollout statistics"));
        }

        let chunk = rollouts.len().div_ceil(cfg.minibatches);
        let mut pl_sum = 0.0;
        let mut vl_sum = 0.0;
        let mut steps = 0usize;
        for mb in rollouts.chunks(chunk) {
            let mut loss = ppo_loss_and_grad(&policy, &critic, mb, cfg.clip_eps).map_err(|e| match e {
                Error::NonFinite(w) => diverged(it, w),
                other => other,
            })?;
            if cfg.c_sft > 0.0 {
                let (_, g) = sft_regularizer(&policy, retention)?;
                loss.policy_grad.iter_mut().zip(&g).for_each(|(a, b)| *a += cfg.c_sft * b);
            }
            if !loss.total.is_finite() {
                return Err(diverged(it, "ppo loss"));
            }
            adam_step(&mut policy.data, &loss.policy_grad, &mut popt).map_err(|e| diverged(it, e.to_string()))?;
            adam_step(&mut critic.data, &loss.critic_grad, &mut copt).map_err(|e| diverged(it, e.to_string()))?;
            pl_sum += loss.policy_loss;
            vl_sum += loss.value_loss;
            steps += 1;
        }
        metrics.push(PpoMetrics {
            iter: it,
            mean_shaped_reward: mean_shaped,
            mean_raw_reward: mean_raw,
            est_kl,
            mean_len,
            policy_loss: pl_sum / steps as f64,
            value_loss: vl_sum / steps as f64,
            retention_nll,
        });
    }
    Ok(PpoOutcome { policy, critic, reference, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{init_params, sequence_logprob, ModelConfig};

    fn setup() -> (ModelParams, RewardParams, Vec<PromptRecord>) {
        let sft = init_params(ModelConfig::default(), 11).unwrap();
        let rm = RewardParams::from_trunk(&sft, 12);
        let prompts = (0..6u64).map(|i| PromptRecord::new(i, TokenSeq(vec![4 + i as u32, 5, 44]), "t")).collect();
        (sft, rm, prompts)
    }

    #[test]
    fn reference_table_is_cached_and_complete() {
        let (sft, rm, prompts) = setup();
        let t = build_reference_table(&prompts, &sft, &rm, 6).unwrap();
        assert_eq!(t, build_reference_table(&prompts, &sft, &rm, 6).unwrap());
        assert_eq!(t.entries.keys().copied().collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
        for p in &prompts {
            let e = t.get(p.id).unwrap();
            assert_eq!(e.r_ref, reward_score(&rm, &p.prompt, &e.y_ref).unwrap());
        }
        assert!(matches!(t.get(99), Err(Error::MissingReference(99))));
    }

    #[test]
    fn rollouts_cross_check_and_repeat() {
        let (sft, _, prompts) = setup();
        let other = init_params(ModelConfig::default(), 13).unwrap();
        let a = generate_rollouts(&sft, &sft, &prompts, 0.9, 6, 3).unwrap();
        for r in &a {
            assert_eq!(r.logp_behavior, r.logp_ref);
        }
        let b = generate_rollouts(&other, &sft, &prompts, 0.9, 6, 3).unwrap();
        for r in &b {
            let s: f64 = r.logp_behavior.iter().sum();
            assert!((s - sequence_logprob(&other, &r.prompt, &r.response).unwrap()).abs() < 1e-12);
            let s: f64 = r.logp_ref.iter().sum();
            assert!((s - sequence_logprob(&sft, &r.prompt, &r.response).unwrap()).abs() < 1e-12);
            assert_eq!(r.num_tokens(), r.response.len() + 1);
        }
        assert_eq!(b, generate_rollouts(&other, &sft, &prompts, 0.9, 6, 3).unwrap());
    }

    #[test]
    fn shaped_reward_identities() {
        let (sft, rm, prompts) = setup();
        let other = init_params(ModelConfig::default(), 14).unwrap();
        let table = build_reference_table(&prompts, &sft, &rm, 6).unwrap();
        // Same policy replaying its own greedy response: both terms vanish.
        let e = table.get(0).unwrap();
        let lp = token_logprobs(&sft, &prompts[0].prompt, &e.y_ref).unwrap();
        let rec = RolloutRecord {
            prompt_id: 0,
            prompt: prompts[0].prompt.clone(),
            response: e.y_ref.clone(),
            logp_behavior: lp.clone(),
            logp_ref: lp,
            rewards: vec![],
            values: vec![],
            advantages: vec![],
            returns: vec![],
            raw_reward: 0.0,
        };
        assert_eq!(shape_rewards(&rec, &rm, Some(&table), 0.05).unwrap().total(), 0.0);

        let rs = generate_rollouts(&other, &sft, &prompts, 0.9, 6, 8).unwrap();
        for r in &rs {
            let r_ref = table.get(r.prompt_id).unwrap().r_ref;
            let rphi = reward_score(&rm, &r.prompt, &r.response).unwrap();
            let s0 = shape_rewards(r, &rm, Some(&table), 0.0).unwrap();
            assert_eq!(s0.total(), rphi - r_ref);
            let kl = sequence_logprob(&other, &r.prompt, &r.response).unwrap()
                - sequence_logprob(&sft, &r.prompt, &r.response).unwrap();
            let s = shape_rewards(r, &rm, Some(&table), 0.3).unwrap();
            assert!((s.total() - (rphi - r_ref - 0.3 * kl)).abs() < 1e-12);
            let free = shape_rewards(r, &rm, None, 0.3).unwrap();
            assert!((free.total() - (rphi - 0.3 * kl)).abs() < 1e-12);
        }
        let missing = RolloutRecord { prompt_id: 77, ..rs[0].clone() };
        assert!(matches!(shape_rewards(&missing, &rm, Some(&table), 0.1), Err(Error::MissingReference(77))));
    }

    #[test]
    fn gae_hand_instance() {
        let r = [0.5, -1.0, 0.25, 2.0];
        let v = [0.1, 0.2, -0.3, 0.4];
        let (g, l) = (0.9, 0.8);
        // Hand-unrolled deltas and recursion.
        let d3 = 2.0 - 0.4;
        let d2 = 0.25 + g * 0.4 + 0.3;
        let d1 = -1.0 + g * -0.3 - 0.2;
        let d0 = 0.5 + g * 0.2 - 0.1;
        let a3 = d3;
        let a2 = d2 + g * l * a3;
        let a1 = d1 + g * l * a2;
        let a0 = d0 + g * l * a1;
        let (adv, ret) = gae_advantages(&r, &v, g, l).unwrap();
        for (x, y) in adv.iter().zip([a0, a1, a2, a3]) {
            assert!((x - y).abs() < 1e-14);
        }
        for t in 0..4 {
            assert!((ret[t] - (adv[t] + v[t])).abs() < 1e-15);
        }
        // λ = γ = 1 telescopes to reward-to-go minus value.
        let (adv, _) = gae_advantages(&r, &v, 1.0, 1.0).unwrap();
        for t in 0..4 {
            let togo: f64 = r[t..].iter().sum();
            assert!((adv[t] - (togo - v[t])).abs() < 1e-14);
        }
        let (adv, _) = gae_advantages(&[0.0; 3], &[0.0; 3], 1.0, 0.95).unwrap();
        assert_eq!(adv, vec![0.0; 3]);
        assert!(gae_advantages(&[0.0; 3], &[0.0; 2], 1.0, 0.95).is_err());
    }

    fn annotated(
        policy: &ModelParams,
        sft: &ModelParams,
        rm: &RewardParams,
        prompts: &[PromptRecord],
    ) -> (CriticParams, Vec<RolloutRecord>) {
        let critic = CriticParams::from_trunk(sft, 21);
        let table = build_reference_table(prompts, sft, rm, 6).unwrap();
        let cfg = PpoConfig::default();
        let mut rs = generate_rollouts(policy, sft, prompts, 0.9, 6, 5).unwrap();
        for r in &mut rs {
            annotate_rollout(r, rm, &critic, Some(&table), &cfg).unwrap();
        }
        (critic, rs)
    }

    #[test]
    fn first_epoch_ratio_is_one() {
        let (sft, rm, prompts) = setup();
        let (critic, rs) = annotated(&sft, &sft, &rm, &prompts);
        let loss = ppo_loss_and_grad(&sft, &critic, &rs, 0.2).unwrap();
        let n: usize = rs.iter().map(|r| r.num_tokens()).sum();
        let mean_adv: f64 = rs.iter().flat_map(|r| r.advantages.iter()).sum::<f64>() / n as f64;
        assert!((loss.policy_loss + mean_adv).abs() < 1e-12);
        let mut vl = 0.0;
        for r in &rs {
            for (v, ret) in r.values.iter().zip(&r.returns) {
                vl += (v - ret) * (v - ret);
            }
        }
        assert!((loss.value_loss - vl / n as f64).abs() < 1e-12);
        assert!((loss.total - (loss.policy_loss + 0.5 * loss.value_loss)).abs() < 1e-15);
    }

    #[test]
    fn zero_advantages_give_zero_policy_gradient() {
        let (sft, rm, prompts) = setup();
        let (critic, mut rs) = annotated(&sft, &sft, &rm, &prompts);
        for r in &mut rs {
            r.advantages.iter_mut().for_each(|a| *a = 0.0);
        }
        let loss = ppo_loss_and_grad(&sft, &critic, &rs, 0.2).unwrap();
        assert!(loss.policy_grad.iter().all(|&g| g == 0.0));
        assert_eq!(loss.policy_loss, 0.0);
    }

    #[test]
    fn nonfinite_ratio_is_reported() {
        let (sft, rm, prompts) = setup();
        let (critic, mut rs) = annotated(&sft, &sft, &rm, &prompts);
        rs[0].logp_behavior[0] = -1e6;
        assert!(matches!(ppo_loss_and_grad(&sft, &critic, &rs, 0.2), Err(Error::NonFinite(_))));
    }

    #[test]
    fn regularizer_matches_nll() {
        let (sft, _, _) = setup();
        let set = RetentionSet { pairs: vec![(TokenSeq(vec![4, 44]), TokenSeq(vec![5, 6]))] };
        assert_eq!(sft_regularizer(&sft, &set).unwrap(), nll_loss_and_grad(&sft, &set.pairs).unwrap());
        assert!(sft_regularizer(&sft, &RetentionSet::default()).is_err());
    }

    #[test]
    fn kl_estimate_properties() {
        let (sft, _, prompts) = setup();
        assert_eq!(estimate_kl(&sft, &sft, &prompts, 3, 6, 1).unwrap(), 0.0);
        let other = init_params(ModelConfig::default(), 15).unwrap();
        let a = estimate_kl(&other, &sft, &prompts, 170, 6, 2).unwrap();
        assert!(a > -0.05, "{a}");
        assert_eq!(a, estimate_kl(&other, &sft, &prompts, 170, 6, 2).unwrap());
        assert!(estimate_kl(&sft, &sft, &prompts, 0, 6, 1).is_err());
    }

    #[test]
    fn zero_coefficient_matches_empty_retention() {
        let (sft, rm, prompts) = setup();
        let cfg = PpoConfig { iterations: 3, prompts_per_iter: 4, c_sft: 0.0, max_new: 4, ..Default::default() };
        let set = RetentionSet { pairs: vec![(TokenSeq(vec![4, 44]), TokenSeq(vec![5]))] };
        let a = ppo_train(&sft, &rm, &prompts, &set, &cfg).unwrap();
        let b = ppo_train(&sft, &rm, &prompts, &RetentionSet::default(), &cfg).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.critic, b.critic);
        let bad = PpoConfig { c_sft: 0.1, ..cfg };
        assert!(ppo_train(&sft, &rm, &prompts, &RetentionSet::default(), &bad).is_err());
    }

    #[test]
    fn training_is_deterministic_and_csv_shaped() {
        let (sft, rm, prompts) = setup();
        let set = RetentionSet { pairs: vec![(TokenSeq(vec![4, 44]), TokenSeq(vec![5]))] };
        let cfg = PpoConfig { iterations: 2, prompts_per_iter: 5, max_new: 4, ..Default::default() };
        let a = ppo_train(&sft, &rm, &prompts, &set, &cfg).unwrap();
        let b = ppo_train(&sft, &rm, &prompts, &set, &cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.policy, b.policy);
        let csv = metrics_to_csv(&a.metrics);
        assert_eq!(csv.lines().next().unwrap(), METRICS_CSV_HEADER);
        assert_eq!(csv.lines().count(), 3);
        let bad = PpoConfig { clip_eps: 1.0, ..cfg };
        assert!(matches!(ppo_train(&sft, &rm, &prompts, &set, &bad), Err(Error::InvalidConfig(_))));
    }
}
