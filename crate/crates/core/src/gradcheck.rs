//! Central finite-difference checks of every analytic gradient.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::offline::{dpo_loss_and_grad, prepare_dpo_examples};
use crate::par;
use crate::ppo::{ppo_loss_and_grad, CriticParams, RolloutRecord};
use crate::reward::{rm_loss_and_grad, RewardParams};
use crate::rng::{self, Rng as StdRng};
use crate::tinylm::{init_params, nll_loss_and_grad, token_logprobs, ModelConfig, ModelParams, TokenId, TokenSeq};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor and the minimum |gradient| of a sampled coordinate.
pub const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// `|a - n| / max(|a|, |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Up to `count` distinct coordinates, drawn from those with
/// `|grad| >= FLOOR` and topped up from the rest if there are too few.
pub fn sample_coords(grad: &[f64], count: usize, seed: u64) -> Vec<usize> {
    let (live, dead): (Vec<usize>, Vec<usize>) = (0..grad.len()).partition(|&i| grad[i].abs() >= FLOOR);
    let mut r = rng::seeded(seed);
    let mut out: Vec<usize> = sample(&mut r, live.len(), count.min(live.len())).into_iter().map(|i| live[i]).collect();
    if out.len() < count {
        let extra = (count - out.len()).min(dead.len());
        out.extend(sample(&mut r, dead.len(), extra).into_iter().map(|i| dead[i]));
    }
    out.sort_unstable();
    out
}

/// Compares `analytic` with central differences of `f` at `x` on `coords`.
pub fn check_gradient<F>(name: &str, x: &[f64], analytic: &[f64], coords: &[usize], f: F) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if x.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!("{name}: {} params vs {} gradient entries", x.len(), analytic.len())));
    }
    if coords.is_empty() {
        return Err(Error::Empty(format!("{name}: no coordinates")));
    }
    let errs = par::try_map(coords, |_, &i| {
        let mut y = x.to_vec();
        y[i] = x[i] + STEP;
        let up = f(&y)?;
        y[i] = x[i] - STEP;
        let down = f(&y)?;
        Ok::<_, Error>(relative_error(analytic[i], (up - down) / (2.0 * STEP)))
    })?;
    let (k, &max) = errs.iter().enumerate().fold((0, &errs[0]), |b, (k, e)| if *e > *b.1 { (k, e) } else { b });
    Ok(GradCheckReport { name: name.to_string(), coords: coords.len(), max_rel_error: max, worst_coord: coords[k] })
}

fn random_seq(r: &mut StdRng, lo: usize, hi: usize) -> TokenSeq {
    let n = r.gen_range(lo..=hi);
    TokenSeq((0..n).map(|_| r.gen_range(4..30) as TokenId).collect())
}

fn random_pairs(r: &mut StdRng, n: usize) -> Vec<(TokenSeq, TokenSeq)> {
    (0..n).map(|_| (random_seq(r, 1, 6), random_seq(r, 0, 6))).collect()
}

fn with_data(p: &ModelParams, x: &[f64]) -> ModelParams {
    ModelParams { config: p.config, data: x.to_vec() }
}

/// Checks the NLL, reward, PPO (policy and critic) and DPO gradients on
/// random instances, `coords` coordinates each.
pub fn gradient_suite(seed: u64, coords: usize) -> Result<Vec<GradCheckReport>> {
    let cfg = ModelConfig::default();
    let mut r = rng::child(seed, 0, 0);
    let mut out = Vec::new();

    let policy = init_params(cfg, rng::derive_seed(seed, 1, 0))?;
    let batch = random_pairs(&mut r, 6);
    let (_, g) = nll_loss_and_grad(&policy, &batch)?;
    out.push(check_gradient("nll", &policy.data, &g, &sample_coords(&g, coords, seed), |x| {
        Ok(nll_loss_and_grad(&with_data(&policy, x), &batch)?.0)
    })?);

    let rm = RewardParams::from_trunk(&init_params(cfg, rng::derive_seed(seed, 1, 1))?, seed);
    let prefs: Vec<PreferencePair> = random_pairs(&mut r, 6)
        .into_iter()
        .enumerate()
        .map(|(i, (p, w))| {
            let mut l = random_seq(&mut r, 0, 6);
            if l == w {
                l.0.push(5);
            }
            PreferencePair::new(i as u64, p, w, l, "gradcheck")
        })
        .collect::<Result<_>>()?;
    let (_, g) = rm_loss_and_grad(&rm, &prefs, 0.01)?;
    out.push(check_gradient("reward", &rm.data, &g, &sample_coords(&g, coords, seed), |x| {
        Ok(rm_loss_and_grad(&RewardParams { config: cfg, data: x.to_vec() }, &prefs, 0.01)?.0)
    })?);

    // Behaviour log-probs are offset from the current policy so that some
    // tokens sit in the clipped region; offsets avoid the clip kinks.
    let critic = CriticParams::from_trunk(&init_params(cfg, rng::derive_seed(seed, 1, 2))?, seed ^ 1);
    let records = random_pairs(&mut r, 6)
        .into_iter()
        .enumerate()
        .map(|(i, (prompt, response))| {
            let lp = token_logprobs(&policy, &prompt, &response)?;
            let n = lp.len();
            let behave = lp
                .iter()
                .map(|v| {
                    let mag = if r.gen_bool(0.5) { r.gen_range(0.0..0.1) } else { r.gen_range(0.4..0.6) };
                    v + if r.gen_bool(0.5) { mag } else { -mag }
                })
                .collect();
            Ok(RolloutRecord {
                prompt_id: i as u64,
                prompt,
                response,
                logp_behavior: behave,
                logp_ref: lp,
                rewards: vec![0.0; n],
                values: vec![0.0; n],
                advantages: (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
                returns: (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
                raw_reward: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = ppo_loss_and_grad(&policy, &critic, &records, 0.2)?;
    out.push(check_gradient(
        "ppo_policy",
        &policy.data,
        &loss.policy_grad,
        &sample_coords(&loss.policy_grad, coords, seed),
        |x| Ok(ppo_loss_and_grad(&with_data(&policy, x), &critic, &records, 0.2)?.total),
    )?);
    out.push(check_gradient(
        "ppo_critic",
        &critic.data,
        &loss.critic_grad,
        &sample_coords(&loss.critic_grad, coords, seed),
        |x| Ok(ppo_loss_and_grad(&policy, &CriticParams { config: cfg, data: x.to_vec() }, &records, 0.2)?.total),
    )?);

    let reference = init_params(cfg, rng::derive_seed(seed, 1, 3))?;
    let examples = prepare_dpo_examples(&reference, &prefs)?;
    let (_, g) = dpo_loss_and_grad(&policy, &examples, 0.5)?;
    out.push(check_gradient("dpo", &policy.data, &g, &sample_coords(&g, coords, seed), |x| {
        Ok(dpo_loss_and_grad(&with_data(&policy, x), &examples, 0.5)?.0)
    })?);
    Ok(out)
}
