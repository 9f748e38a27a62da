use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const NUM_SPECIALS: usize = 4;

/// Default printable alphabet: 26 letters, 10 digits, space and 23
/// punctuation marks. With the 4 specials that is 64 ids.
const DEFAULT_SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .,!?;:'\"-()[]{}/@#$%&*+";

/// A sequence of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab: vocab_size }),
            None => Ok(()),
        }
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

/// Character-level vocabulary with four reserved ids.
///
/// Uppercase ASCII is folded to lowercase before lookup; any other
/// character outside the alphabet encodes to UNK.
#[derive(Debug, Clone)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::with_symbols(DEFAULT_SYMBOLS.chars().collect()).expect("default alphabet is valid")
    }
}

impl Vocab {
    pub fn with_symbols(symbols: Vec<char>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, (i + NUM_SPECIALS) as TokenId).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        Ok(Vocab { symbols, index })
    }

    pub fn size(&self) -> usize {
        self.symbols.len() + NUM_SPECIALS
    }

    pub fn id(&self, c: char) -> Option<TokenId> {
        self.index.get(&c.to_ascii_lowercase()).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<char> {
        (id as usize).checked_sub(NUM_SPECIALS).and_then(|i| self.symbols.get(i).copied())
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        TokenSeq(text.chars().map(|c| self.id(c).unwrap_or(UNK)).collect())
    }

    /// PAD, BOS and EOS decode to nothing; UNK decodes to U+FFFD.
    pub fn decode(&self, seq: &[TokenId]) -> String {
        seq.iter()
            .filter_map(|&t| match t {
                PAD | BOS | EOS => None,
                UNK => Some('\u{FFFD}'),
                _ => Some(self.symbol(t).unwrap_or('\u{FFFD}')),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_has_64_ids() {
        let v = Vocab::default();
        assert_eq!(v.size(), 64);
        assert_eq!(v.id('a'), Some(4));
    }

    #[test]
    fn out_of_alphabet_is_unk() {
        let v = Vocab::default();
        assert_eq!(v.encode("a~b").0, vec![4, UNK, 5]);
        assert_eq!(v.encode("AB"), v.encode("ab"));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "[a-z0-9 .,!?;:'\"()\\[\\]{}/@#$%&*+-]{0,40}") {
            let v = Vocab::default();
            prop_assert_eq!(v.decode(&v.encode(&s)), s);
        }
    }
}
