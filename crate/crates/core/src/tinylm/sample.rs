use rand::Rng;

use super::model::{context_at, softmax, ModelParams};
use super::vocab::{TokenId, TokenSeq, EOS};
use crate::error::{Error, Result};

/// Smallest probability-sorted prefix whose mass reaches `p`, as
/// `(token, probability)` pairs. Equal probabilities sort by lower id.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Vec<(TokenId, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for i in order {
        kept.push((i as TokenId, probs[i]));
        cum += probs[i];
        if cum >= p {
            break;
        }
    }
    kept
}

fn draw<R: Rng + ?Sized>(kept: &[(TokenId, f64)], rng: &mut R) -> TokenId {
    let mass: f64 = kept.iter().map(|k| k.1).sum();
    let u = rng.gen::<f64>() * mass;
    let mut cum = 0.0;
    for &(t, q) in kept {
        cum += q;
        if u < cum {
            return t;
        }
    }
    kept[kept.len() - 1].0
}

/// Room left for generated tokens so that `prompt ‖ response ‖ EOS` fits.
fn budget(params: &ModelParams, prompt: &[TokenId], max_new: usize) -> usize {
    max_new.min(params.config.max_len.saturating_sub(prompt.len() + 1))
}

/// Nucleus sampling until EOS or `max_new` tokens. The returned sequence
/// excludes the terminating EOS.
pub fn sample_top_p<R: Rng + ?Sized>(
    params: &ModelParams,
    prompt: &[TokenId],
    p: f64,
    max_new: usize,
    rng: &mut R,
) -> Result<TokenSeq> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("top_p must be in (0, 1], got {p}")));
    }
    let cfg = &params.config;
    TokenSeq(prompt.to_vec()).validate(cfg.vocab_size)?;
    let trunk = params.trunk();
    let mut history = prompt.to_vec();
    let limit = budget(params, prompt, max_new);
    for _ in 0..limit {
        let ctx = context_at(cfg.context_window, &history);
        let probs = softmax(&trunk.output(&trunk.hidden(&ctx)));
        let tok = draw(&nucleus_filter(&probs, p), rng);
        if tok == EOS {
            break;
        }
        history.push(tok);
    }
    Ok(TokenSeq(history[prompt.len()..].to_vec()))
}

/// Argmax decoding (lowest id wins ties) until EOS or `max_new` tokens.
pub fn greedy_decode(params: &ModelParams, prompt: &[TokenId], max_new: usize) -> Result<TokenSeq> {
    let cfg = &params.config;
    TokenSeq(prompt.to_vec()).validate(cfg.vocab_size)?;
    let trunk = params.trunk();
    let mut history = prompt.to_vec();
    for _ in 0..budget(params, prompt, max_new) {
        let ctx = context_at(cfg.context_window, &history);
        let z = trunk.output(&trunk.hidden(&ctx));
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        if best as TokenId == EOS {
            break;
        }
        history.push(best as TokenId);
    }
    Ok(TokenSeq(history[prompt.len()..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tinylm::{init_params, ModelConfig};

    /// Four-token vocabulary with b2 set to fixed logits and all other
    /// weights zero, so the next-token distribution is context-free.
    fn fixed_dist_model(logits: [f64; 4]) -> ModelParams {
        let cfg = ModelConfig { vocab_size: 4, context_window: 2, embed_dim: 2, hidden_dim: 2, max_len: 64 };
        let mut p = ModelParams::zeros(cfg);
        let n = p.data.len();
        p.data[n - 4..].copy_from_slice(&logits);
        p
    }

    #[test]
    fn rejects_nonpositive_p() {
        let p = ModelParams::zeros(ModelConfig::default());
        let mut r = rng::seeded(0);
        assert!(sample_top_p(&p, &[4], 0.0, 3, &mut r).is_err());
        assert!(sample_top_p(&p, &[4], 1.5, 3, &mut r).is_err());
    }

    #[test]
    fn nucleus_breaks_ties_by_lower_id() {
        let kept = nucleus_filter(&[0.25, 0.25, 0.25, 0.25], 0.5);
        assert_eq!(kept.iter().map(|k| k.0).collect::<Vec<_>>(), vec![0, 1]);
        let kept = nucleus_filter(&[0.02, 0.95, 0.03], 0.9);
        assert_eq!(kept, vec![(1, 0.95)]);
    }

    #[test]
    fn dominant_token_always_emitted() {
        // Token 3 holds mass 0.95; with p = 0.9 the nucleus is {3}.
        let rest = (0.05f64 / 3.0).ln();
        let p = fixed_dist_model([rest, rest, rest, 0.95f64.ln()]);
        let mut r = rng::seeded(1);
        for _ in 0..50 {
            let s = sample_top_p(&p, &[3], 0.9, 5, &mut r).unwrap();
            assert_eq!(s.0, vec![3; 5]);
        }
    }

    #[test]
    fn full_nucleus_matches_distribution() {
        // p = 1: first-token frequencies over 1e5 draws vs exact softmax,
        // chi-square with 3 dof (99.9% critical value 16.27).
        let logits = [0.3, -0.4, 1.1, 0.2];
        let p = fixed_dist_model(logits);
        let probs = softmax(&logits);
        let mut counts = [0usize; 4];
        let mut r = rng::seeded(42);
        let draws = 100_000;
        for _ in 0..draws {
            let s = sample_top_p(&p, &[3], 1.0, 1, &mut r).unwrap();
            let t = s.0.first().copied().unwrap_or(EOS);
            counts[t as usize] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&c, &q)| {
                let e = q * draws as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn sampling_is_deterministic_in_rng() {
        let p = init_params(ModelConfig::default(), 9).unwrap();
        let a = sample_top_p(&p, &[4, 5], 0.9, 20, &mut rng::seeded(5)).unwrap();
        let b = sample_top_p(&p, &[4, 5], 0.9, 20, &mut rng::seeded(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_params_greedy_repeats_pad() {
        let p = ModelParams::zeros(ModelConfig::default());
        let out = greedy_decode(&p, &[4, 5], 6).unwrap();
        assert_eq!(out.0, vec![0; 6]);
        let q = init_params(ModelConfig::default(), 2).unwrap();
        assert_eq!(greedy_decode(&q, &[4], 10).unwrap(), greedy_decode(&q, &[4], 10).unwrap());
    }
}
