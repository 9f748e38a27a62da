use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PreferencePair, PromptRecord, SftRecord};
use crate::error::{Error, Result};
use crate::rng;
use crate::tinylm::{TokenId, TokenSeq, Vocab};

/// First letter id in the default vocabulary (`a`).
const LETTER_BASE: TokenId = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Fraction of response tokens equal to the target token.
    TokenDensity,
    /// Position-wise agreement between the response and the prompt payload.
    EchoPrefix,
    /// Closeness of the response length to a target length.
    LengthTarget,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::TokenDensity => "token_density",
            TaskKind::EchoPrefix => "echo_prefix",
            TaskKind::LengthTarget => "length_target",
        }
    }
}

/// A synthetic task: prompt/response generators plus the ground-truth
/// reward oracle that labels preferences and judges models.
///
/// Prompts are a payload of 2..=4 letters from the first `alphabet`
/// letters followed by `?`. Base responses echo the payload with
/// probability `echo_prob` per position and are otherwise uniform letters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub target_token: TokenId,
    pub target_len: usize,
    pub weight: f64,
    /// Probability that a preference label is flipped.
    pub annotation_noise: f64,
    pub alphabet: usize,
    pub max_response: usize,
    pub echo_prob: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::TokenDensity,
            target_token: LETTER_BASE + 4, // 'e'
            target_len: 4,
            weight: 1.0,
            annotation_noise: 0.0,
            alphabet: 8,
            max_response: 6,
            echo_prob: 0.7,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.annotation_noise) {
            return Err(Error::InvalidConfig(format!(
                "annotation_noise must be in [0, 0.5), got {}",
                self.annotation_noise
            )));
        }
        if self.alphabet == 0 || self.alphabet > 26 {
            return Err(Error::InvalidConfig("alphabet must be in 1..=26".into()));
        }
        if self.max_response == 0 || self.target_len == 0 {
            return Err(Error::InvalidConfig("max_response and target_len must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.echo_prob) {
            return Err(Error::InvalidConfig("echo_prob must be in [0, 1]".into()));
        }
        if self.kind == TaskKind::TokenDensity && !self.letters().contains(&self.target_token) {
            return Err(Error::InvalidConfig(format!(
                "target_token {} is outside the task alphabet",
                self.target_token
            )));
        }
        Ok(())
    }

    pub fn letters(&self) -> std::ops::Range<TokenId> {
        LETTER_BASE..LETTER_BASE + self.alphabet as TokenId
    }

    fn marker() -> TokenId {
        Vocab::default().id('?').expect("'?' is in the default alphabet")
    }

    /// The prompt without its trailing `?` marker.
    pub fn payload<'a>(&self, prompt: &'a [TokenId]) -> &'a [TokenId] {
        match prompt.split_last() {
            Some((&last, rest)) if last == Self::marker() => rest,
            _ => prompt,
        }
    }

    /// Ground-truth reward of `response` (EOS excluded) for `prompt`.
    pub fn oracle(&self, prompt: &[TokenId], response: &[TokenId]) -> f64 {
        let len = response.len();
        let raw = match self.kind {
            TaskKind::TokenDensity => {
                if len == 0 {
                    0.0
                } else {
                    response.iter().filter(|&&t| t == self.target_token).count() as f64 / len as f64
                }
            }
            TaskKind::EchoPrefix => {
                let payload = self.payload(prompt);
                let denom = payload.len().max(len);
                if denom == 0 {
                    0.0
                } else {
                    let hits = payload.iter().zip(response).filter(|(a, b)| a == b).count();
                    hits as f64 / denom as f64
                }
            }
            TaskKind::LengthTarget => {
                let t = self.target_len as f64;
                (1.0 - (len as f64 - t).abs() / t).max(0.0)
            }
        };
        self.weight * raw
    }

    fn letter<R: Rng>(&self, r: &mut R) -> TokenId {
        r.gen_range(self.letters())
    }

    pub fn sample_prompt<R: Rng>(&self, r: &mut R) -> (TokenSeq, String) {
        let k = r.gen_range(2..=4);
        let mut p: Vec<TokenId> = (0..k).map(|_| self.letter(r)).collect();
        p.push(Self::marker());
        let size = if k <= 3 { "short" } else { "long" };
        (TokenSeq(p), format!("{}/{}", self.kind.name(), size))
    }

    /// Response from the supervised-data distribution.
    pub fn base_response<R: Rng>(&self, prompt: &[TokenId], r: &mut R) -> TokenSeq {
        let payload = self.payload(prompt).to_vec();
        let len = r.gen_range(1..=self.max_response);
        TokenSeq(
            (0..len)
                .map(|i| {
                    if !payload.is_empty() && r.gen_bool(self.echo_prob) {
                        payload[i % payload.len()]
                    } else {
                        self.letter(r)
                    }
                })
                .collect(),
        )
    }

    /// Response from a broader annotation-time distribution: a random
    /// per-response rate of task-relevant tokens.
    pub fn explore_response<R: Rng>(&self, prompt: &[TokenId], r: &mut R) -> TokenSeq {
        let payload = self.payload(prompt).to_vec();
        let len = r.gen_range(1..=self.max_response);
        let q: f64 = r.gen();
        TokenSeq(
            (0..len)
                .map(|i| {
                    if r.gen_bool(q) {
                        match self.kind {
                            TaskKind::TokenDensity => self.target_token,
                            _ if !payload.is_empty() => payload[i % payload.len()],
                            _ => self.letter(r),
                        }
                    } else {
                        self.letter(r)
                    }
                })
                .collect(),
        )
    }

    pub fn pair_response<R: Rng>(&self, prompt: &[TokenId], r: &mut R) -> TokenSeq {
        if r.gen_bool(0.5) {
            self.base_response(prompt, r)
        } else {
            self.explore_response(prompt, r)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusPlan {
    pub sft: usize,
    pub prompts: usize,
    pub pairs: usize,
    pub eval_prompts: usize,
    /// Copies of each retention example mixed into the supervised set.
    pub retention_repeats: usize,
    /// Fraction of the prompt set replaced by low-quality prompts.
    pub noise_prompt_frac: f64,
    /// When set, every pair has unequal response lengths and exactly this
    /// fraction (rounded) has the longer response preferred.
    pub long_preferred_frac: Option<f64>,
}

impl Default for CorpusPlan {
    fn default() -> Self {
        CorpusPlan {
            sft: 2000,
            prompts: 256,
            pairs: 2000,
            eval_prompts: 128,
            retention_repeats: 20,
            noise_prompt_frac: 0.1,
            long_preferred_frac: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub task: TaskSpec,
    pub sft: Vec<SftRecord>,
    pub prompts: Vec<PromptRecord>,
    pub pairs: Vec<PreferencePair>,
    pub eval_prompts: Vec<PromptRecord>,
    pub retention: Vec<SftRecord>,
}

/// Behaviours the policy must keep after alignment: identity answers and
/// fixed output formats.
pub fn retention_examples() -> Vec<SftRecord> {
    let v = Vocab::default();
    [
        ("who are you?", "glm"),
        ("your name?", "glm"),
        ("who made you?", "zhipu"),
        ("json?", "{}"),
        ("json list?", "[]"),
        ("list?", "- a"),
    ]
    .iter()
    .enumerate()
    .map(|(i, (p, r))| SftRecord {
        id: 900_000 + i as u64,
        prompt: v.encode(p),
        response: v.encode(r),
        task_tag: "retention".into(),
    })
    .collect()
}

const NOISE_PROMPTS: [&str; 5] = ["?", "a", "..", "lottery?", ";;;"];
const EVAL_ID_BASE: u64 = 1_000_000;

pub fn gen_synthetic_corpus(task: &TaskSpec, plan: &CorpusPlan, seed: u64) -> Result<SyntheticCorpus> {
    task.validate()?;
    if let Some(f) = plan.long_preferred_frac {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidConfig(format!("long_preferred_frac must be in [0, 1], got {f}")));
        }
    }
    let vocab = Vocab::default();
    let retention = retention_examples();

    let mut r = rng::child(seed, rng::stream::CORPUS, 0);
    let mut sft = Vec::with_capacity(plan.sft + retention.len() * plan.retention_repeats);
    for i in 0..plan.sft {
        let (prompt, tag) = task.sample_prompt(&mut r);
        let response = task.base_response(&prompt, &mut r);
        sft.push(SftRecord { id: i as u64, prompt, response, task_tag: tag });
    }
    for rep in 0..plan.retention_repeats {
        for ex in &retention {
            let id = (plan.sft + rep * retention.len()) as u64 + ex.id - 900_000;
            sft.push(SftRecord { id, ..ex.clone() });
        }
    }

    let mut r = rng::child(seed, rng::stream::CORPUS, 1);
    let mut prompts = Vec::with_capacity(plan.prompts);
    for i in 0..plan.prompts {
        if r.gen_bool(plan.noise_prompt_frac.clamp(0.0, 1.0)) {
            let text = NOISE_PROMPTS[r.gen_range(0..NOISE_PROMPTS.len())];
            prompts.push(PromptRecord::new(i as u64, vocab.encode(text), "noise"));
        } else {
            let (p, tag) = task.sample_prompt(&mut r);
            prompts.push(PromptRecord::new(i as u64, p, &tag));
        }
    }

    let mut r = rng::child(seed, rng::stream::CORPUS, 2);
    let mut pairs = Vec::with_capacity(plan.pairs);
    let long_quota = plan.long_preferred_frac.map(|f| (f * plan.pairs as f64).round() as usize);
    let (mut n_long, mut n_short) = (0usize, 0usize);
    while pairs.len() < plan.pairs {
        let (prompt, _) = task.sample_prompt(&mut r);
        let a = task.pair_response(&prompt, &mut r);
        let b = task.pair_response(&prompt, &mut r);
        let (ra, rb) = (task.oracle(&prompt, &a), task.oracle(&prompt, &b));
        if a == b || ra == rb {
            continue;
        }
        let (mut w, mut l) = if ra > rb { (a, b) } else { (b, a) };
        if r.gen_bool(task.annotation_noise) {
            std::mem::swap(&mut w, &mut l);
        }
        if let Some(quota) = long_quota {
            if w.len() == l.len() {
                continue;
            }
            if w.len() > l.len() {
                if n_long >= quota {
                    continue;
                }
                n_long += 1;
            } else {
                if n_short >= plan.pairs - quota {
                    continue;
                }
                n_short += 1;
            }
        }
        pairs.push(PreferencePair::new(pairs.len() as u64, prompt, w, l, "synthetic")?);
    }

    let mut r = rng::child(seed, rng::stream::CORPUS, 3);
    let eval_prompts = (0..plan.eval_prompts)
        .map(|i| {
            let (p, tag) = task.sample_prompt(&mut r);
            PromptRecord::new(EVAL_ID_BASE + i as u64, p, &tag)
        })
        .collect();

    Ok(SyntheticCorpus { task: task.clone(), sft, prompts, pairs, eval_prompts, retention })
}
