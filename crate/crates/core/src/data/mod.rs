//! Preference-data curation: prompt quality rules, length-difference
//! bucketing and balancing, reward-variance prompt filtering, corpus
//! statistics and synthetic corpora with ground-truth reward oracles.

mod buckets;
mod corpus;
pub mod io;
mod quality;
mod synth;
mod variance;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::TokenSeq;

pub use buckets::{assign_buckets, balance_buckets, length_difference, long_win_counts, BucketSpec, Buckets};
pub use corpus::{corpus_stats, ComparisonShape, CorpusStats};
pub use quality::{filter_prompts, score_prompt_quality, QualityScorer, RuleSet};
pub use synth::{gen_synthetic_corpus, retention_examples, CorpusPlan, SyntheticCorpus, TaskKind, TaskSpec};
pub use variance::{variance_filter, PromptVariance, VarianceFilterConfig, VarianceFilterOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Intention {
    Clear,
    Ambiguous,
    Unclear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Semantics {
    Clear,
    Guessable,
    Incomprehensible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QualityLabel {
    pub intention: Intention,
    pub semantics: Semantics,
    pub answerable: bool,
}

impl QualityLabel {
    pub const USABLE: QualityLabel =
        QualityLabel { intention: Intention::Clear, semantics: Semantics::Clear, answerable: true };

    /// Clear intention, clear semantics and answerable.
    pub fn is_usable(&self) -> bool {
        *self == Self::USABLE
    }
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: u64,
    pub prompt: TokenSeq,
    pub task_tag: String,
    #[serde(default)]
    pub quality: Option<QualityLabel>,
    #[serde(default = "one")]
    pub turns: u32,
}

impl PromptRecord {
    pub fn new(id: u64, prompt: TokenSeq, task_tag: &str) -> Self {
        PromptRecord { id, prompt, task_tag: task_tag.to_string(), quality: None, turns: 1 }
    }
}

/// A supervised `(prompt, response)` example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    pub id: u64,
    pub prompt: TokenSeq,
    pub response: TokenSeq,
    pub task_tag: String,
}

impl SftRecord {
    pub fn pair(&self) -> (TokenSeq, TokenSeq) {
        (self.prompt.clone(), self.response.clone())
    }
}

/// `(prompt, preferred, dispreferred)` with token lengths of both
/// responses (EOS not counted).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub id: u64,
    pub prompt: TokenSeq,
    pub y_w: TokenSeq,
    pub y_l: TokenSeq,
    pub len_w: usize,
    pub len_l: usize,
    pub source_tag: String,
}

impl PreferencePair {
    pub fn new(id: u64, prompt: TokenSeq, y_w: TokenSeq, y_l: TokenSeq, source_tag: &str) -> Result<Self> {
        let pair = PreferencePair {
            id,
            prompt,
            len_w: y_w.len(),
            len_l: y_l.len(),
            y_w,
            y_l,
            source_tag: source_tag.to_string(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.y_w == self.y_l {
            return Err(Error::InvalidArgument(format!("pair {}: identical responses", self.id)));
        }
        if self.len_w != self.y_w.len() || self.len_l != self.y_l.len() {
            return Err(Error::InvalidArgument(format!("pair {}: length fields disagree", self.id)));
        }
        Ok(())
    }

    /// The same pair with preferred and dispreferred swapped.
    pub fn swapped(&self) -> Self {
        PreferencePair {
            id: self.id,
            prompt: self.prompt.clone(),
            y_w: self.y_l.clone(),
            y_l: self.y_w.clone(),
            len_w: self.len_l,
            len_l: self.len_w,
            source_tag: self.source_tag.clone(),
        }
    }
}
