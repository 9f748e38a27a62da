use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{nll_loss_and_grad, token_logprobs, ModelParams};
use super::optim::{adam_step, OptimizerState};
use super::vocab::TokenSeq;
use crate::error::{Error, Result};
use crate::par;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NllTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for NllTrainConfig {
    fn default() -> Self {
        NllTrainConfig { lr: 1e-3, epochs: 30, batch_size: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NllEpoch {
    pub epoch: usize,
    pub loss: f64,
}

/// Token-averaged NLL without the gradient.
pub fn mean_nll(params: &ModelParams, data: &[(TokenSeq, TokenSeq)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("nll data".into()));
    }
    let parts = par::try_map(data, |_, (p, r)| token_logprobs(params, p, r))?;
    let tokens: usize = parts.iter().map(Vec::len).sum();
    let total: f64 = parts.iter().flatten().sum();
    Ok(-total / tokens as f64)
}

/// Minibatch Adam on the NLL. `curve[0]` is the loss before any update;
/// `curve[e]` is the full-data loss after epoch `e`.
pub fn train_nll(
    init: &ModelParams,
    data: &[(TokenSeq, TokenSeq)],
    cfg: &NllTrainConfig,
) -> Result<(ModelParams, Vec<NllEpoch>)> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let mut params = init.clone();
    let mut curve = vec![NllEpoch { epoch: 0, loss: mean_nll(&params, data)? }];
    let mut opt = OptimizerState::new(params.data.len(), cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::child(cfg.seed, rng::stream::SHUFFLE, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grad) = nll_loss_and_grad(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration: epoch, what: "nll loss".into() });
            }
            adam_step(&mut params.data, &grad, &mut opt)
                .map_err(|e| Error::Divergence { iteration: epoch, what: e.to_string() })?;
        }
        let loss = mean_nll(&params, data)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: epoch, what: "nll loss".into() });
        }
        curve.push(NllEpoch { epoch, loss });
    }
    Ok((params, curve))
}
