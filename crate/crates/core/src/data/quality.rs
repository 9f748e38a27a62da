use super::{Intention, PromptRecord, QualityLabel, Semantics};
use crate::tinylm::{TokenId, Vocab, UNK};

/// Anything that can label a prompt on the three quality axes.
pub trait QualityScorer {
    fn score(&self, prompt: &PromptRecord) -> QualityLabel;
}

/// Transparent rule-based quality classifier.
#[derive(Debug, Clone)]
pub struct RuleSet {
    pub vocab: Vocab,
    /// Words that signal a request when they open the prompt.
    pub request_words: Vec<String>,
    /// Substrings marking requests no model can answer.
    pub unanswerable_patterns: Vec<String>,
    /// Prompts shorter than this are incomprehensible.
    pub min_tokens: usize,
    /// Above this UNK ratio the semantics are only guessable.
    pub max_unknown_ratio: f64,
}

impl Default for RuleSet {
    fn default() -> Self {
        let words = [
            "assist", "help", "write", "tell", "explain", "give", "list", "make", "create", "describe", "plan",
            "please", "what", "how", "why", "who", "when", "where", "which", "can", "could", "show", "find",
        ];
        let unanswerable = ["lottery", "winning number", "predict the future", "stock price tomorrow"];
        RuleSet {
            vocab: Vocab::default(),
            request_words: words.iter().map(|s| s.to_string()).collect(),
            unanswerable_patterns: unanswerable.iter().map(|s| s.to_string()).collect(),
            min_tokens: 3,
            max_unknown_ratio: 0.25,
        }
    }
}

impl RuleSet {
    fn is_content(&self, t: TokenId) -> bool {
        self.vocab.symbol(t).is_some_and(|c| c.is_ascii_alphanumeric())
    }
}

impl QualityScorer for RuleSet {
    fn score(&self, rec: &PromptRecord) -> QualityLabel {
        let toks = rec.prompt.as_slice();
        let text = self.vocab.decode(toks);
        let words: Vec<String> =
            text.split(|c: char| !c.is_ascii_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_string).collect();
        let is_request = |w: &String| self.request_words.iter().any(|r| r == w);

        let intention = if text.contains('?') || words.first().is_some_and(is_request) {
            Intention::Clear
        } else if words.iter().any(is_request) {
            Intention::Ambiguous
        } else {
            Intention::Unclear
        };

        let unknown = toks.iter().filter(|&&t| t == UNK).count();
        let semantics = if toks.len() < self.min_tokens || !toks.iter().any(|&t| self.is_content(t)) {
            Semantics::Incomprehensible
        } else if unknown as f64 > self.max_unknown_ratio * toks.len() as f64 {
            Semantics::Guessable
        } else {
            Semantics::Clear
        };

        let answerable = !self.unanswerable_patterns.iter().any(|p| text.contains(p.as_str()));
        QualityLabel { intention, semantics, answerable }
    }
}

pub fn score_prompt_quality(prompt: &PromptRecord, scorer: &dyn QualityScorer) -> QualityLabel {
    scorer.score(prompt)
}

/// Keeps prompts whose label (stored, or scored on the fly) is fully
/// usable and whose length is at least `min_len`. Order is preserved.
pub fn filter_prompts(prompts: &[PromptRecord], scorer: &dyn QualityScorer, min_len: usize) -> Vec<PromptRecord> {
    prompts
        .iter()
        .filter(|p| {
            let label = p.quality.unwrap_or_else(|| scorer.score(p));
            label.is_usable() && p.prompt.len() >= min_len
        })
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, text: &str) -> PromptRecord {
        PromptRecord::new(id, Vocab::default().encode(text), "t")
    }

    #[test]
    fn travel_itinerary_prompt_is_usable() {
        let r = rec(0, "Assist me in crafting a three-day travel itinerary to Beijing with a budget of under 5000.");
        let label = RuleSet::default().score(&r);
        assert_eq!(label, QualityLabel::USABLE);
    }

    #[test]
    fn lottery_prompt_is_unanswerable() {
        let label = RuleSet::default().score(&rec(0, "What is the winning lottery number for tomorrow?"));
        assert!(!label.answerable);
        assert_eq!(label.intention, Intention::Clear);
    }

    #[test]
    fn statement_has_unclear_intention() {
        let label = RuleSet::default().score(&rec(0, "The gentleman attended the meeting, dressed in formal attire."));
        assert_eq!(label.intention, Intention::Unclear);
        let label = RuleSet::default().score(&rec(0, "the answer, please"));
        assert_eq!(label.intention, Intention::Ambiguous);
    }

    #[test]
    fn short_or_symbol_only_is_incomprehensible() {
        let rs = RuleSet::default();
        assert_eq!(rs.score(&rec(0, "hi")).semantics, Semantics::Incomprehensible);
        assert_eq!(rs.score(&rec(0, "?!..")).semantics, Semantics::Incomprehensible);
        assert_eq!(rs.score(&rec(0, "a~~~~?")).semantics, Semantics::Guessable);
    }

    #[test]
    fn filter_keeps_qualifying_subset_in_order() {
        let rs = RuleSet::default();
        let prompts = vec![
            rec(0, "explain tides?"),
            rec(1, "hi"),
            rec(2, "lottery numbers?"),
            rec(3, "how do magnets work?"),
            rec(4, "the cat sat."),
            rec(5, "why?"),
        ];
        let kept = filter_prompts(&prompts, &rs, 5);
        let expected: Vec<u64> =
            prompts.iter().filter(|p| rs.score(p).is_usable() && p.prompt.len() >= 5).map(|p| p.id).collect();
        assert_eq!(kept.iter().map(|p| p.id).collect::<Vec<_>>(), expected);
        assert_eq!(expected, vec![0, 3]);
        assert!(filter_prompts(&prompts[1..3], &rs, 0).is_empty());
    }

    #[test]
    fn min_len_zero_with_clear_labels_is_identity() {
        let mut prompts = vec![rec(0, "x"), rec(1, ".."), rec(2, "")];
        for p in &mut prompts {
            p.quality = Some(QualityLabel::USABLE);
        }
        assert_eq!(filter_prompts(&prompts, &RuleSet::default(), 0), prompts);
    }
}
