use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, LayoutEntry};
use super::vocab::{TokenId, TokenSeq, BOS, EOS};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { vocab_size: 64, context_window: 8, embed_dim: 16, hidden_dim: 32, max_len: 256 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must be at least 4 (specials), got {}",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("context_window", self.context_window),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn w1_offset(&self) -> usize {
        self.vocab_size * self.embed_dim
    }

    fn input_dim(&self) -> usize {
        self.context_window * self.embed_dim
    }

    fn b1_offset(&self) -> usize {
        self.w1_offset() + self.input_dim() * self.hidden_dim
    }

    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden_dim
    }

    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.hidden_dim * self.vocab_size
    }

    /// Parameter count of the LM trunk.
    pub fn num_params(&self) -> usize {
        self.b2_offset() + self.vocab_size
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        vec![
            LayoutEntry::new("embedding", 0, self.w1_offset()),
            LayoutEntry::new("w1", self.w1_offset(), self.input_dim() * self.hidden_dim),
            LayoutEntry::new("b1", self.b1_offset(), self.hidden_dim),
            LayoutEntry::new("w2", self.w2_offset(), self.hidden_dim * self.vocab_size),
            LayoutEntry::new("b2", self.b2_offset(), self.vocab_size),
        ]
    }

    /// Validates token ids and total length of `prompt ‖ response ‖ EOS`
    /// and returns the concatenation.
    pub(crate) fn full_sequence(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<TokenId>> {
        let resp = with_eos(response);
        let len = prompt.len() + resp.len();
        if len > self.max_len {
            return Err(Error::LengthOverflow { len, max: self.max_len });
        }
        let mut full = Vec::with_capacity(len);
        full.extend_from_slice(prompt);
        full.extend_from_slice(&resp);
        if let Some(&id) = full.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: self.vocab_size });
        }
        Ok(full)
    }
}

/// Flat LM parameters; layout is given by [`ModelConfig::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        ModelParams { config, data: vec![0.0; config.num_params()] }
    }

    pub fn from_vec(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if data.len() != config.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                config.num_params(),
                data.len()
            )));
        }
        Ok(ModelParams { config, data })
    }

    pub fn trunk(&self) -> Trunk<'_> {
        Trunk::new(&self.config, &self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_checkpoint(&self, stage: &str, seed: u64) -> Result<Checkpoint> {
        Checkpoint::new(self.config, stage, seed, self.config.layout(), self.data.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.layout != ck.config.layout() {
            return Err(Error::Checkpoint("layout is not a plain LM".into()));
        }
        ModelParams::from_vec(ck.config, ck.data.clone())
    }
}

/// Glorot-uniform weights per matrix, zero biases.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut r = rng::child(seed, rng::stream::INIT, 0);
    let mut data = vec![0.0; config.num_params()];
    let (v, n, de, dh) = (config.vocab_size, config.context_window, config.embed_dim, config.hidden_dim);
    let mats = [(0, v * de, v, de), (config.w1_offset(), n * de * dh, n * de, dh), (config.w2_offset(), dh * v, dh, v)];
    for (off, len, fan_in, fan_out) in mats {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut data[off..off + len] {
            *w = r.gen_range(-a..a);
        }
    }
    Ok(ModelParams { config, data })
}

/// Returns `response` cut at its first EOS, with EOS appended.
pub fn with_eos(response: &[TokenId]) -> Vec<TokenId> {
    let end = response.iter().position(|&t| t == EOS).unwrap_or(response.len());
    let mut out = Vec::with_capacity(end + 1);
    out.extend_from_slice(&response[..end]);
    out.push(EOS);
    out
}

/// The last `window` tokens of `history`, left-padded with BOS.
pub fn context_at(window: usize, history: &[TokenId]) -> Vec<TokenId> {
    let take = history.len().min(window);
    let mut ctx = vec![BOS; window - take];
    ctx.extend_from_slice(&history[history.len() - take..]);
    ctx
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// Borrowed view of LM trunk weights. Scalar-head models keep the trunk
/// at the front of their flat vector, so the same view serves them.
#[derive(Clone, Copy)]
pub struct Trunk<'a> {
    cfg: &'a ModelConfig,
    w: &'a [f64],
}

impl<'a> Trunk<'a> {
    pub fn new(cfg: &'a ModelConfig, w: &'a [f64]) -> Self {
        debug_assert!(w.len() >= cfg.num_params());
        Trunk { cfg, w }
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    /// Hidden activations `tanh(W1 x + b1)` for a full-width context.
    pub fn hidden(&self, ctx: &[TokenId]) -> Vec<f64> {
        let c = self.cfg;
        let (de, dh) = (c.embed_dim, c.hidden_dim);
        let w1 = &self.w[c.w1_offset()..c.b1_offset()];
        let mut a = self.w[c.b1_offset()..c.w2_offset()].to_vec();
        for (k, &tok) in ctx.iter().enumerate() {
            let emb = &self.w[tok as usize * de..(tok as usize + 1) * de];
            for (e, &xv) in emb.iter().enumerate() {
                let row = &w1[(k * de + e) * dh..(k * de + e + 1) * dh];
                for (aj, wj) in a.iter_mut().zip(row) {
                    *aj += xv * wj;
                }
            }
        }
        a.iter_mut().for_each(|v| *v = v.tanh());
        a
    }

    pub fn output(&self, h: &[f64]) -> Vec<f64> {
        let c = self.cfg;
        let v = c.vocab_size;
        let w2 = &self.w[c.w2_offset()..c.b2_offset()];
        let mut z = self.w[c.b2_offset()..c.num_params()].to_vec();
        for (j, &hj) in h.iter().enumerate() {
            for (zv, wv) in z.iter_mut().zip(&w2[j * v..(j + 1) * v]) {
                *zv += hj * wv;
            }
        }
        z
    }

    /// Accumulates into `grad` the gradient flowing back from `dlogits`
    /// (through W2, b2) and/or `dhidden` (e.g. from a scalar head).
    pub fn backward(
        &self,
        ctx: &[TokenId],
        h: &[f64],
        dlogits: Option<&[f64]>,
        dhidden: Option<&[f64]>,
        grad: &mut [f64],
    ) {
        let c = self.cfg;
        let (v, de, dh) = (c.vocab_size, c.embed_dim, c.hidden_dim);
        let mut dh_vec = match dhidden {
            Some(d) => d.to_vec(),
            None => vec![0.0; dh],
        };
        if let Some(dz) = dlogits {
            let w2 = &self.w[c.w2_offset()..c.b2_offset()];
            let (head, tail) = grad.split_at_mut(c.b2_offset());
            for (g, d) in tail[..v].iter_mut().zip(dz) {
                *g += d;
            }
            let gw2 = &mut head[c.w2_offset()..];
            for j in 0..dh {
                let row = &w2[j * v..(j + 1) * v];
                let grow = &mut gw2[j * v..(j + 1) * v];
                let mut acc = 0.0;
                for ((g, w), d) in grow.iter_mut().zip(row).zip(dz) {
                    *g += h[j] * d;
                    acc += w * d;
                }
                dh_vec[j] += acc;
            }
        }
        let da: Vec<f64> = dh_vec.iter().zip(h).map(|(d, hj)| d * (1.0 - hj * hj)).collect();
        for (g, d) in grad[c.b1_offset()..c.w2_offset()].iter_mut().zip(&da) {
            *g += d;
        }
        let w1_off = c.w1_offset();
        for (k, &tok) in ctx.iter().enumerate() {
            let eo = tok as usize * de;
            for e in 0..de {
                let i = k * de + e;
                let xv = self.w[eo + e];
                let row = &self.w[w1_off + i * dh..w1_off + (i + 1) * dh];
                let mut dx = 0.0;
                {
                    let grow = &mut grad[w1_off + i * dh..w1_off + (i + 1) * dh];
                    for ((g, w), d) in grow.iter_mut().zip(row).zip(&da) {
                        *g += xv * d;
                        dx += w * d;
                    }
                }
                grad[eo + e] += dx;
            }
        }
    }
}

/// Per-position forward cache for one `(prompt, response)` sequence.
pub(crate) struct SeqForward {
    pub contexts: Vec<Vec<TokenId>>,
    pub hidden: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
    pub targets: Vec<TokenId>,
}

impl SeqForward {
    pub fn run(trunk: Trunk<'_>, prompt: &[TokenId], response: &[TokenId]) -> Result<Self> {
        let cfg = trunk.config();
        let full = cfg.full_sequence(prompt, response)?;
        let n = full.len() - prompt.len();
        let mut out = SeqForward {
            contexts: Vec::with_capacity(n),
            hidden: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            targets: full[prompt.len()..].to_vec(),
        };
        for pos in prompt.len()..full.len() {
            let ctx = context_at(cfg.context_window, &full[..pos]);
            let h = trunk.hidden(&ctx);
            out.log_probs.push(log_softmax(&trunk.output(&h)));
            out.hidden.push(h);
            out.contexts.push(ctx);
        }
        Ok(out)
    }

    pub fn token_logprobs(&self) -> Vec<f64> {
        self.log_probs.iter().zip(&self.targets).map(|(lp, &t)| lp[t as usize]).collect()
    }

    /// Adds `sum_t weights[t] * d log p(target_t) / d params` to `grad`.
    pub fn backward(&self, trunk: Trunk<'_>, weights: &[f64], grad: &mut [f64]) {
        for t in 0..self.targets.len() {
            let w = weights[t];
            if w == 0.0 {
                continue;
            }
            let mut dz: Vec<f64> = self.log_probs[t].iter().map(|lp| -w * lp.exp()).collect();
            dz[self.targets[t] as usize] += w;
            trunk.backward(&self.contexts[t], &self.hidden[t], Some(&dz), None, grad);
        }
    }
}

/// Next-token logits for a context of exactly `context_window` tokens.
pub fn logits(params: &ModelParams, context: &[TokenId]) -> Result<Vec<f64>> {
    let cfg = &params.config;
    if context.len() != cfg.context_window {
        return Err(Error::ContextLength { got: context.len(), expected: cfg.context_window });
    }
    TokenSeq::validate(&TokenSeq(context.to_vec()), cfg.vocab_size)?;
    let trunk = params.trunk();
    Ok(trunk.output(&trunk.hidden(context)))
}

/// Per-token log-probabilities of `response ‖ EOS` given `prompt`.
pub fn token_logprobs(params: &ModelParams, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
    Ok(SeqForward::run(params.trunk(), prompt, response)?.token_logprobs())
}

/// `log π(response ‖ EOS | prompt)`.
pub fn sequence_logprob(params: &ModelParams, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
    Ok(token_logprobs(params, prompt, response)?.iter().sum())
}

/// Token-averaged negative log-likelihood over the batch and its exact
/// gradient.
pub fn nll_loss_and_grad(params: &ModelParams, batch: &[(TokenSeq, TokenSeq)]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("nll batch".into()));
    }
    let trunk = params.trunk();
    let np = params.data.len();
    let parts = par::try_map(batch, |_, (prompt, response)| {
        let fwd = SeqForward::run(trunk, prompt, response)?;
        let lp: f64 = fwd.token_logprobs().iter().sum();
        let mut g = vec![0.0; np];
        fwd.backward(trunk, &vec![-1.0; fwd.targets.len()], &mut g);
        Ok::<_, Error>((lp, fwd.targets.len(), g))
    })?;
    let mut total_lp = 0.0;
    let mut tokens = 0usize;
    let mut grad = vec![0.0; np];
    for (lp, n, g) in &parts {
        total_lp += lp;
        tokens += n;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let scale = 1.0 / tokens as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((-total_lp * scale, grad))
}
