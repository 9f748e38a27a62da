//! Scalar reward model: an LM trunk with a linear head read at the hidden
//! state whose context ends with the response's EOS.
//!
//! Training minimizes `-log σ(r_w - r_l) + λ (r_w² + r_l²)` averaged over
//! pairs. The squared-score term keeps the score distribution centred and
//! bounded.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::stats;
use crate::tinylm::{
    adam_step, context_at, Checkpoint, LayoutEntry, ModelConfig, ModelParams, OptimizerState, TokenId, TokenSeq, Trunk,
};

/// LM trunk followed by a scalar head `[w: hidden_dim, b]`, in one flat
/// vector. Also used for the PPO critic.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarHeadModel {
    pub config: ModelConfig,
    pub data: Vec<f64>,
}

pub type RewardParams = ScalarHeadModel;

impl ScalarHeadModel {
    pub fn num_params(config: &ModelConfig) -> usize {
        config.num_params() + config.hidden_dim + 1
    }

    pub fn zeros(config: ModelConfig) -> Self {
        ScalarHeadModel { config, data: vec![0.0; Self::num_params(&config)] }
    }

    /// Copies `trunk` and draws the head weights uniformly in
    /// `±sqrt(6 / (hidden_dim + 1))`; the head bias starts at zero.
    pub fn from_trunk(trunk: &ModelParams, seed: u64) -> Self {
        let mut m = Self::with_zero_head(trunk);
        let a = (6.0 / (trunk.config.hidden_dim + 1) as f64).sqrt();
        let mut r = rng::child(seed, rng::stream::HEAD_INIT, 0);
        let off = trunk.config.num_params();
        for w in &mut m.data[off..off + trunk.config.hidden_dim] {
            *w = r.gen_range(-a..a);
        }
        m
    }

    pub fn with_zero_head(trunk: &ModelParams) -> Self {
        let mut data = trunk.data.clone();
        data.resize(Self::num_params(&trunk.config), 0.0);
        ScalarHeadModel { config: trunk.config, data }
    }

    pub fn trunk(&self) -> Trunk<'_> {
        Trunk::new(&self.config, &self.data)
    }

    pub fn head_offset(&self) -> usize {
        self.config.num_params()
    }

    pub fn head_weights(&self) -> &[f64] {
        &self.data[self.head_offset()..self.head_offset() + self.config.hidden_dim]
    }

    pub fn head_bias(&self) -> f64 {
        self.data[self.data.len() - 1]
    }

    pub fn layout(config: &ModelConfig) -> Vec<LayoutEntry> {
        let mut l = config.layout();
        l.push(LayoutEntry::new("head_w", config.num_params(), config.hidden_dim));
        l.push(LayoutEntry::new("head_b", config.num_params() + config.hidden_dim, 1));
        l
    }

    pub fn to_checkpoint(&self, stage: &str, seed: u64) -> Result<Checkpoint> {
        Checkpoint::new(self.config, stage, seed, Self::layout(&self.config), self.data.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.layout != Self::layout(&ck.config) {
            return Err(Error::Checkpoint("layout is not a scalar-head model".into()));
        }
        Ok(ScalarHeadModel { config: ck.config, data: ck.data.clone() })
    }

    pub fn head_value(&self, h: &[f64]) -> f64 {
        self.head_bias() + self.head_weights().iter().zip(h).map(|(w, x)| w * x).sum::<f64>()
    }

    /// Accumulates the gradient of `d * head_value(h)` into `grad`.
    pub(crate) fn backward_head(&self, ctx: &[TokenId], h: &[f64], d: f64, grad: &mut [f64]) {
        let off = self.head_offset();
        let dh = self.config.hidden_dim;
        for (g, x) in grad[off..off + dh].iter_mut().zip(h) {
            *g += d * x;
        }
        grad[off + dh] += d;
        let dhidden: Vec<f64> = self.head_weights().iter().map(|w| d * w).collect();
        self.trunk().backward(ctx, h, None, Some(&dhidden), grad);
    }
}

/// Context whose last token is the response's EOS.
fn pooled_context(config: &ModelConfig, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<TokenId>> {
    let full = config.full_sequence(prompt, response)?;
    Ok(context_at(config.context_window, &full))
}

struct Scored {
    ctx: Vec<TokenId>,
    h: Vec<f64>,
    r: f64,
}

fn score_full(params: &RewardParams, prompt: &[TokenId], response: &[TokenId]) -> Result<Scored> {
    let ctx = pooled_context(&params.config, prompt, response)?;
    let h = params.trunk().hidden(&ctx);
    let r = params.head_value(&h);
    Ok(Scored { ctx, h, r })
}

/// `r(x, y)`: scalar score of `response ‖ EOS` after `prompt`.
pub fn reward_score(params: &RewardParams, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
    Ok(score_full(params, prompt, response)?.r)
}

/// Scores many `(prompt, response)` items, in order.
pub fn score_batch(params: &RewardParams, items: &[(TokenSeq, TokenSeq)]) -> Result<Vec<f64>> {
    par::try_map(items, |_, (p, r)| reward_score(params, p, r))
}

/// `-log σ(x)`, stable for large |x|.
pub(crate) fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Single-pair loss as a function of the two scores.
pub fn pair_loss(r_w: f64, r_l: f64, lambda_reg: f64) -> f64 {
    neg_log_sigmoid(r_w - r_l) + lambda_reg * (r_w * r_w + r_l * r_l)
}

/// Mean pairwise loss with the squared-score term, and its gradient.
pub fn rm_loss_and_grad(params: &RewardParams, pairs: &[PreferencePair], lambda_reg: f64) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("reward batch".into()));
    }
    let np = params.data.len();
    let parts = par::try_map(pairs, |_, p| {
        let w = score_full(params, &p.prompt, &p.y_w)?;
        let l = score_full(params, &p.prompt, &p.y_l)?;
        let loss = pair_loss(w.r, l.r, lambda_reg);
        let s = sigmoid(l.r - w.r);
        let mut g = vec![0.0; np];
        params.backward_head(&w.ctx, &w.h, -s + 2.0 * lambda_reg * w.r, &mut g);
        params.backward_head(&l.ctx, &l.h, s + 2.0 * lambda_reg * l.r, &mut g);
        Ok::<_, Error>((loss, g))
    })?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; np];
    for (l, g) in &parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let scale = 1.0 / pairs.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Fraction of pairs with `r_w > r_l`; exact ties count one half.
pub fn eval_pairwise_accuracy(params: &RewardParams, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("accuracy needs at least one pair".into()));
    }
    let scores = par::try_map(pairs, |_, p| {
        Ok::<_, Error>((reward_score(params, &p.prompt, &p.y_w)?, reward_score(params, &p.prompt, &p.y_l)?))
    })?;
    Ok(accuracy_from_scores(&scores))
}

pub fn accuracy_from_scores(scores: &[(f64, f64)]) -> f64 {
    let total: f64 = scores
        .iter()
        .map(|&(w, l)| {
            if w > l {
                1.0
            } else if w == l {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    total / scores.len() as f64
}

/// Spearman correlation between reward and response length (EOS not
/// counted) over the given responses.
pub fn length_bias_probe(params: &RewardParams, items: &[(TokenSeq, TokenSeq)]) -> Result<f64> {
    if items.len() < 3 {
        return Err(Error::InvalidArgument(format!("length probe needs at least 3 responses, got {}", items.len())));
    }
    let scores = score_batch(params, items)?;
    let lens: Vec<f64> = items.iter().map(|(_, r)| r.len() as f64).collect();
    stats::spearman(&scores, &lens)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub lambda_reg: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        RewardTrainConfig { lambda_reg: 0.01, lr: 3e-3, epochs: 20, batch_size: 32, seed: 0 }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::InvalidConfig("lambda_reg must be non-negative".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub heldout_accuracy: Option<f64>,
}

fn mean_loss(params: &RewardParams, pairs: &[PreferencePair], lambda_reg: f64) -> Result<f64> {
    let losses = par::try_map(pairs, |_, p| {
        Ok::<_, Error>(pair_loss(
            reward_score(params, &p.prompt, &p.y_w)?,
            reward_score(params, &p.prompt, &p.y_l)?,
            lambda_reg,
        ))
    })?;
    Ok(losses.iter().sum::<f64>() / pairs.len() as f64)
}

/// Initializes the trunk from `sft`, the head from the seed, and runs
/// minibatch Adam. `curve[0]` is measured before the first update.
pub fn train_reward_model(
    sft: &ModelParams,
    train: &[PreferencePair],
    heldout: &[PreferencePair],
    cfg: &RewardTrainConfig,
) -> Result<(RewardParams, Vec<RewardEpoch>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("reward training pairs".into()));
    }
    let mut params = RewardParams::from_trunk(sft, cfg.seed);
    let acc = |p: &RewardParams| -> Result<Option<f64>> {
        if heldout.is_empty() {
            Ok(None)
        } else {
            eval_pairwise_accuracy(p, heldout).map(Some)
        }
    };
    let mut curve = vec![RewardEpoch {
        epoch: 0,
        loss: mean_loss(&params, train, cfg.lambda_reg)?,
        heldout_accuracy: acc(&params)?,
    }];
    let mut opt = OptimizerState::new(params.data.len(), cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::child(cfg.seed, rng::stream::SHUFFLE, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grad) = rm_loss_and_grad(&params, &batch, cfg.lambda_reg)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration: epoch, what: "reward loss".into() });
            }
            adam_step(&mut params.data, &grad, &mut opt)
                .map_err(|e| Error::Divergence { iteration: epoch, what: e.to_string() })?;
        }
        let loss = mean_loss(&params, train, cfg.lambda_reg)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: epoch, what: "reward loss".into() });
        }
        curve.push(RewardEpoch { epoch, loss, heldout_accuracy: acc(&params)? });
    }
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{init_params, EOS, PAD};

    fn rm(seed: u64) -> RewardParams {
        RewardParams::from_trunk(&init_params(ModelConfig::default(), seed).unwrap(), seed)
    }

    #[test]
    fn zero_model_scores_zero() {
        let z = RewardParams::zeros(ModelConfig::default());
        assert_eq!(reward_score(&z, &[4, 5], &[6, 7, 8]).unwrap(), 0.0);
        assert_eq!(reward_score(&z, &[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn trailing_pad_after_eos_is_ignored() {
        let m = rm(3);
        let a = reward_score(&m, &[4, 5], &[6, 7]).unwrap();
        let b = reward_score(&m, &[4, 5], &[6, 7, EOS, PAD, PAD]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn score_matches_independent_forward() {
        let m = rm(5);
        let c = m.config;
        let (v, n, de, dh) = (c.vocab_size, c.context_window, c.embed_dim, c.hidden_dim);
        let p = &m.data;
        let prompt = [9u32, 10, 11];
        let resp = [12u32, 13];
        let mut seq = vec![crate::tinylm::BOS; n];
        let full: Vec<u32> = prompt.iter().chain(&resp).copied().chain([EOS]).collect();
        for k in 0..n {
            if k < full.len() {
                seq[n - 1 - k] = full[full.len() - 1 - k];
            }
        }
        let w1 = v * de;
        let b1 = w1 + n * de * dh;
        let head = c.num_params();
        let mut r = p[head + dh];
        for j in 0..dh {
            let mut a = p[b1 + j];
            for k in 0..n {
                for e in 0..de {
                    a += p[seq[k] as usize * de + e] * p[w1 + (k * de + e) * dh + j];
                }
            }
            r += p[head + j] * a.tanh();
        }
        let got = reward_score(&m, &prompt, &resp).unwrap();
        assert!((got - r).abs() < 1e-12);
    }

    #[test]
    fn closed_form_pair_losses() {
        assert!((pair_loss(0.3, 0.3, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((pair_loss(2.0, 0.0, 0.0) - 0.126928).abs() < 1e-6);
        let reg = pair_loss(0.5, -0.5, 1.0) - pair_loss(0.5, -0.5, 0.0);
        assert!((reg - 0.5).abs() < 1e-15);
        for d in [-3.0, -0.1, 0.0, 0.4, 5.0] {
            let both = neg_log_sigmoid(d) + neg_log_sigmoid(-d);
            assert!(both >= 2.0 * std::f64::consts::LN_2 - 1e-15);
        }
        assert!(neg_log_sigmoid(-800.0).is_finite());
    }

    fn pair(id: u64, w: Vec<u32>, l: Vec<u32>) -> PreferencePair {
        PreferencePair::new(id, TokenSeq(vec![4, 5]), TokenSeq(w), TokenSeq(l), "t").unwrap()
    }

    #[test]
    fn accuracy_rules() {
        assert_eq!(accuracy_from_scores(&[(1.0, 0.0), (0.0, 0.0), (0.0, 1.0), (2.0, 1.0)]), 0.625);
        let z = RewardParams::zeros(ModelConfig::default());
        let pairs = vec![pair(0, vec![6], vec![7])];
        assert_eq!(eval_pairwise_accuracy(&z, &pairs).unwrap(), 0.5);
        assert!(eval_pairwise_accuracy(&z, &[]).is_err());
    }

    #[test]
    fn random_scorer_is_near_chance() {
        let mut r = rng::seeded(17);
        let scores: Vec<(f64, f64)> = (0..10_000).map(|_| (r.gen::<f64>(), r.gen::<f64>())).collect();
        let acc = accuracy_from_scores(&scores);
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn probe_needs_three_points() {
        let m = rm(1);
        let items = vec![(TokenSeq(vec![4]), TokenSeq(vec![5])); 2];
        assert!(length_bias_probe(&m, &items).is_err());
        let z = RewardParams::zeros(ModelConfig::default());
        let items: Vec<_> = (1..6).map(|k| (TokenSeq(vec![4]), TokenSeq(vec![5; k]))).collect();
        assert_eq!(length_bias_probe(&z, &items).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_layout_extends_trunk() {
        let m = rm(2);
        let ck = m.to_checkpoint("rm", 2).unwrap();
        let names: Vec<_> = ck.layout.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["embedding", "w1", "b1", "w2", "b2", "head_w", "head_b"]);
        let back = RewardParams::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn strong_regularizer_collapses_scores() {
        // Label-free identical pairs: only the squared-score term has signal.
        let sft = init_params(ModelConfig::default(), 4).unwrap();
        let pairs: Vec<_> =
            (0..32).map(|i| pair(i, vec![7 + (i % 5) as u32, 6], vec![6, 7 + (i % 5) as u32])).collect();
        let flipped: Vec<_> = pairs.iter().map(|p| p.swapped()).collect();
        let data: Vec<_> = pairs.into_iter().chain(flipped).collect();
        let cfg = RewardTrainConfig { lambda_reg: 10.0, lr: 1e-2, epochs: 40, batch_size: 16, seed: 1 };
        let (m, _) = train_reward_model(&sft, &data, &[], &cfg).unwrap();
        let items: Vec<_> = data.iter().flat_map(|p| [(p.prompt.clone(), p.y_w.clone())]).collect();
        let ms = stats::mean(&score_batch(&m, &items).unwrap().iter().map(|s| s * s).collect::<Vec<_>>());
        assert!(ms < 1e-3, "mean square score {ms}");
    }
}
