use serde::{Deserialize, Serialize};

use super::PreferencePair;
use crate::error::{Error, Result};

/// Shape of one comparison record, as counted for corpus statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonShape {
    pub turns: u32,
    pub history_tokens: usize,
    pub prompt_tokens: usize,
    pub response_tokens: [usize; 2],
}

impl From<&PreferencePair> for ComparisonShape {
    /// Prompts are single flattened turns, so no history.
    fn from(p: &PreferencePair) -> Self {
        ComparisonShape {
            turns: 1,
            history_tokens: 0,
            prompt_tokens: p.prompt.len(),
            response_tokens: [p.len_w, p.len_l],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_comparisons: usize,
    pub avg_turns: f64,
    pub avg_history_tokens: f64,
    pub avg_prompt_tokens: f64,
    pub avg_response_tokens: f64,
}

pub fn corpus_stats<I>(records: I) -> Result<CorpusStats>
where
    I: IntoIterator,
    I::Item: Into<ComparisonShape>,
{
    let mut n = 0usize;
    let (mut turns, mut hist, mut prompt, mut resp) = (0u64, 0usize, 0usize, 0usize);
    for r in records {
        let s: ComparisonShape = r.into();
        n += 1;
        turns += s.turns as u64;
        hist += s.history_tokens;
        prompt += s.prompt_tokens;
        resp += s.response_tokens[0] + s.response_tokens[1];
    }
    if n == 0 {
        return Err(Error::Empty("corpus has no comparisons".into()));
    }
    let nf = n as f64;
    Ok(CorpusStats {
        num_comparisons: n,
        avg_turns: turns as f64 / nf,
        avg_history_tokens: hist as f64 / nf,
        avg_prompt_tokens: prompt as f64 / nf,
        avg_response_tokens: resp as f64 / (2.0 * nf),
    })
}

impl CorpusStats {
    pub const CSV_HEADER: &'static str =
        "num_comparisons,avg_turns,avg_history_tokens,avg_prompt_tokens,avg_response_tokens";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.num_comparisons,
            self.avg_turns,
            self.avg_history_tokens,
            self.avg_prompt_tokens,
            self.avg_response_tokens
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::TokenSeq;

    #[test]
    fn single_pair() {
        let p = PreferencePair::new(0, TokenSeq(vec![4; 5]), TokenSeq(vec![5; 4]), TokenSeq(vec![6; 6]), "t").unwrap();
        let s = corpus_stats([&p]).unwrap();
        assert_eq!(s.num_comparisons, 1);
        assert_eq!(s.avg_prompt_tokens, 5.0);
        assert_eq!(s.avg_response_tokens, 5.0);
        assert!(s.to_csv().starts_with(CorpusStats::CSV_HEADER));
    }

    #[test]
    fn dialogue_shapes_and_empty() {
        let shapes = [
            ComparisonShape { turns: 2, history_tokens: 300, prompt_tokens: 100, response_tokens: [250, 280] },
            ComparisonShape { turns: 3, history_tokens: 330, prompt_tokens: 110, response_tokens: [270, 270] },
        ];
        let s = corpus_stats(shapes).unwrap();
        assert_eq!(s.avg_turns, 2.5);
        assert_eq!(s.avg_history_tokens, 315.0);
        assert_eq!(s.avg_response_tokens, 267.5);
        let rev = corpus_stats(shapes.iter().rev().copied()).unwrap();
        assert_eq!(s, rev);
        assert!(corpus_stats(Vec::<ComparisonShape>::new()).is_err());
    }
}
