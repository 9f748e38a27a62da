//! Offline alignment: DPO on reward-model-built pairs, and rejection
//! sampling fine-tuning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{PreferencePair, PromptRecord, SftRecord};
use crate::error::{Error, Result};
use crate::par;
use crate::reward::{neg_log_sigmoid, reward_score, sigmoid, RewardParams};
use crate::rng;
use crate::tinylm::model::SeqForward;
use crate::tinylm::{
    adam_step, sample_top_p, sequence_logprob, train_nll, ModelParams, NllEpoch, NllTrainConfig, OptimizerState,
    TokenSeq,
};

pub const DPO_SOURCE_TAG: &str = "rm-discriminator";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta_dpo: f64,
    /// Responses sampled per prompt when building pairs.
    pub k: usize,
    /// Minimum reward gap for a constructed pair.
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub top_p: f64,
    pub max_new: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta_dpo: 0.1,
            k: 4,
            margin: 0.1,
            lr: 1e-3,
            epochs: 10,
            batch_size: 32,
            top_p: 0.9,
            max_new: 8,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_dpo > 0.0) {
            return Err(Error::InvalidConfig("beta_dpo must be positive".into()));
        }
        if self.k < 2 {
            return Err(Error::InvalidConfig("k must be at least 2".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidConfig("margin must be non-negative".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidConfig("lr and batch_size must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig("top_p must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `k` top-p samples with their reward scores, from the prompt's own rng.
#[allow(clippy::too_many_arguments)]
fn scored_samples(
    policy: &ModelParams,
    rm: &RewardParams,
    prompt: &PromptRecord,
    k: usize,
    top_p: f64,
    max_new: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<(TokenSeq, f64)>> {
    let mut r = rng::child(seed, stream, prompt.id);
    (0..k)
        .map(|_| {
            let y = sample_top_p(policy, &prompt.prompt, top_p, max_new, &mut r)?;
            let s = reward_score(rm, &prompt.prompt, &y)?;
            Ok((y, s))
        })
        .collect()
}

/// Index of the max (or min) score; the earliest index wins ties.
fn extreme(scores: &[(TokenSeq, f64)], max: bool) -> usize {
    let mut best = 0;
    for (i, (_, s)) in scores.iter().enumerate().skip(1) {
        if (max && *s > scores[best].1) || (!max && *s < scores[best].1) {
            best = i;
        }
    }
    best
}

/// Best and worst indices when their gap reaches `margin` and the two
/// responses differ.
fn select_pair(s: &[(TokenSeq, f64)], margin: f64) -> Option<(usize, usize)> {
    let (w, l) = (extreme(s, true), extreme(s, false));
    if s[w].1 - s[l].1 < margin || s[w].0 == s[l].0 {
        None
    } else {
        Some((w, l))
    }
}

/// Samples `k` responses per prompt from `sft` and pairs the best against
/// the worst when their score gap reaches `margin`.
pub fn construct_dpo_pairs(
    prompts: &[PromptRecord],
    sft: &ModelParams,
    rm: &RewardParams,
    cfg: &DpoConfig,
) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    let pairs = par::try_map(prompts, |_, p| {
        let s = scored_samples(sft, rm, p, cfg.k, cfg.top_p, cfg.max_new, cfg.seed, rng::stream::DPO_PAIRS)?;
        let Some((w, l)) = select_pair(&s, cfg.margin) else {
            return Ok::<_, Error>(None);
        };
        Ok(Some(PreferencePair::new(p.id, p.prompt.clone(), s[w].0.clone(), s[l].0.clone(), DPO_SOURCE_TAG)?))
    })?;
    Ok(pairs.into_iter().flatten().collect())
}

/// A preference pair with frozen reference log-probs.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoExample {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

pub fn prepare_dpo_examples(ref_policy: &ModelParams, pairs: &[PreferencePair]) -> Result<Vec<DpoExample>> {
    par::try_map(pairs, |_, p| {
        Ok::<_, Error>(DpoExample {
            prompt: p.prompt.clone(),
            chosen: p.y_w.clone(),
            rejected: p.y_l.clone(),
            ref_chosen: sequence_logprob(ref_policy, &p.prompt, &p.y_w)?,
            ref_rejected: sequence_logprob(ref_policy, &p.prompt, &p.y_l)?,
        })
    })
}

/// `β [(log π(y_w) - log π_0(y_w)) - (log π(y_l) - log π_0(y_l))]`.
pub fn dpo_margin(policy: &ModelParams, ex: &DpoExample, beta: f64) -> Result<f64> {
    let w = sequence_logprob(policy, &ex.prompt, &ex.chosen)?;
    let l = sequence_logprob(policy, &ex.prompt, &ex.rejected)?;
    Ok(beta * ((w - ex.ref_chosen) - (l - ex.ref_rejected)))
}

/// Mean `-log σ(margin)` over the batch and its gradient.
pub fn dpo_loss_and_grad(policy: &ModelParams, examples: &[DpoExample], beta: f64) -> Result<(f64, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::Empty("dpo batch".into()));
    }
    let trunk = policy.trunk();
    let np = policy.data.len();
    let parts = par::try_map(examples, |_, ex| {
        let fw = SeqForward::run(trunk, &ex.prompt, &ex.chosen)?;
        let fl = SeqForward::run(trunk, &ex.prompt, &ex.rejected)?;
        let w: f64 = fw.token_logprobs().iter().sum();
        let l: f64 = fl.token_logprobs().iter().sum();
        let m = beta * ((w - ex.ref_chosen) - (l - ex.ref_rejected));
        // d loss / d margin = -σ(-m)
        let d = -sigmoid(-m) * beta;
        let mut g = vec![0.0; np];
        fw.backward(trunk, &vec![d; fw.targets.len()], &mut g);
        fl.backward(trunk, &vec![-d; fl.targets.len()], &mut g);
        Ok::<_, Error>((neg_log_sigmoid(m), g))
    })?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; np];
    for (l, g) in &parts {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let scale = 1.0 / examples.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DpoEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub heldout_margin: Option<f64>,
}

fn mean_dpo_loss(policy: &ModelParams, examples: &[DpoExample], beta: f64) -> Result<f64> {
    let m = par::try_map(examples, |_, ex| dpo_margin(policy, ex, beta))?;
    Ok(m.iter().map(|&x| neg_log_sigmoid(x)).sum::<f64>() / examples.len() as f64)
}

fn mean_margin(policy: &ModelParams, examples: &[DpoExample], beta: f64) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let m = par::try_map(examples, |_, ex| dpo_margin(policy, ex, beta))?;
    Ok(Some(m.iter().sum::<f64>() / m.len() as f64))
}

/// Adam on the DPO loss with `sft` as the frozen reference. `curve[0]` is
/// measured before the first update.
pub fn dpo_train(
    sft: &ModelParams,
    train: &[PreferencePair],
    heldout: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<(ModelParams, Vec<DpoEpoch>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("dpo training pairs".into()));
    }
    let train_ex = prepare_dpo_examples(sft, train)?;
    let held_ex = prepare_dpo_examples(sft, heldout)?;
    let mut policy = sft.clone();
    let mut curve = vec![DpoEpoch {
        epoch: 0,
        loss: mean_dpo_loss(&policy, &train_ex, cfg.beta_dpo)?,
        heldout_margin: mean_margin(&policy, &held_ex, cfg.beta_dpo)?,
    }];
    let mut opt = OptimizerState::new(policy.data.len(), cfg.lr);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::child(cfg.seed, rng::stream::SHUFFLE, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| train_ex[i].clone()).collect();
            let (loss, grad) = dpo_loss_and_grad(&policy, &batch, cfg.beta_dpo)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration: epoch, what: "dpo loss".into() });
            }
            adam_step(&mut policy.data, &grad, &mut opt)
                .map_err(|e| Error::Divergence { iteration: epoch, what: e.to_string() })?;
        }
        curve.push(DpoEpoch {
            epoch,
            loss: mean_dpo_loss(&policy, &train_ex, cfg.beta_dpo)?,
            heldout_margin: mean_margin(&policy, &held_ex, cfg.beta_dpo)?,
        });
    }
    Ok((policy, curve))
}

/// Best of `k` samples per prompt by reward score, earliest on ties.
pub fn rft_select(
    prompts: &[PromptRecord],
    policy: &ModelParams,
    rm: &RewardParams,
    k: usize,
    top_p: f64,
    max_new: usize,
    seed: u64,
) -> Result<Vec<SftRecord>> {
    if k == 0 {
        return Err(Error::InvalidArgument("rft needs k >= 1".into()));
    }
    par::try_map(prompts, |_, p| {
        let s = scored_samples(policy, rm, p, k, top_p, max_new, seed, rng::stream::RFT)?;
        let best = extreme(&s, true);
        Ok::<_, Error>(SftRecord {
            id: p.id,
            prompt: p.prompt.clone(),
            response: s[best].0.clone(),
            task_tag: p.task_tag.clone(),
        })
    })
}

/// NLL fine-tuning on the selected samples.
pub fn rft_train(
    sft: &ModelParams,
    selected: &[SftRecord],
    cfg: &NllTrainConfig,
) -> Result<(ModelParams, Vec<NllEpoch>)> {
    let data: Vec<_> = selected.iter().map(SftRecord::pair).collect();
    train_nll(sft, &data, cfg)
}
