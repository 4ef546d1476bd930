//! Whitespace word-level tokenizer over a fixed toy vocabulary.
//!
//! Unknown words map to a reserved unknown token, so `tokenize` never fails;
//! `detokenize(tokenize(text))` is the identity on in-vocabulary text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sequence of token identifiers, each `< vocab_size`.
pub type TokenSeq = Vec<usize>;

pub const UNK: &str = "<unk>";
pub const SYS: &str = "<sys>";
pub const USER: &str = "[user]";
pub const ASST: &str = "[asst]";
pub const EOS: &str = "<eos>";
pub const FLAG: &str = "<flag>";
pub const FILLER: &str = "!";

const SPECIALS: [&str; 7] = [UNK, SYS, USER, ASST, EOS, FLAG, FILLER];

/// Content words of the toy vocabulary, in fixed id order after the specials.
const WORDS: [&str; 57] = [
    // verbs
    "make", "build", "craft", "design", "assemble", "sketch",
    // articles and prepositions
    "a", "the", "for", "with", "of", "to",
    // adjectives
    "red", "blue", "green", "small", "large", "shiny", "quiet", "fancy",
    // nouns
    "widget", "gadget", "box", "kite", "lamp", "chair", "wheel", "rope", "basket", "drum",
    // answer words
    "sure", "here", "is", "plan", "steps", "follow", "then", "attach", "paint", "finish",
    // refusal words
    "i", "cannot", "help", "that", "request",
    // misc
    "you", "want", "need", "first", "second", "piece", "part", "tool", "glue", "wood",
    "metal", "please",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words
    }
}

impl Tokenizer {
    /// The default 64-word toy vocabulary (specials first).
    pub fn toy() -> Self {
        let words = SPECIALS
            .iter()
            .chain(WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        Self::from_words(words).expect("toy vocabulary is well formed")
    }

    /// A reduced vocabulary of the first `n` toy words; used by small test
    /// models. Always keeps the specials, so `n >= 8`.
    pub fn toy_truncated(n: usize) -> Self {
        let full = Self::toy();
        let words = full.words[..n.clamp(SPECIALS.len() + 1, full.words.len())].to_vec();
        Self::from_words(words).expect("truncated vocabulary is well formed")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Config(format!(
                "vocabulary must start with the reserved unknown token {UNK:?}"
            )));
        }
        Ok(Tokenizer { words, index })
    }

    /// Rebuild the lookup index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of a special token that is guaranteed to exist in any vocabulary
    /// built by this module.
    pub fn special(&self, word: &str) -> usize {
        self.id(word)
            .unwrap_or_else(|| panic!("special token {word:?} missing from vocabulary"))
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(0))
            .collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.words.get(t).map_or(UNK, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn validate_seq(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.vocab_size()) {
            Some(&bad) => Err(Error::TokenOutOfRange {
                id: bad,
                vocab: self.vocab_size(),
            }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_empty_seq() {
        let tok = Tokenizer::toy();
        assert_eq!(tok.tokenize(""), Vec::<usize>::new());
    }

    #[test]
    fn in_vocab_round_trip() {
        let tok = Tokenizer::toy();
        let ids = tok.tokenize("make a widget");
        assert_eq!(ids.len(), 3);
        assert_eq!(tok.detokenize(&ids), "make a widget");
    }

    #[test]
    fn out_of_vocab_maps_to_unk() {
        let tok = Tokenizer::toy();
        let ids = tok.tokenize("make a zeppelin");
        assert_eq!(ids[2], tok.unk_id());
        assert_eq!(tok.detokenize(&ids), format!("make a {UNK}"));
    }

    #[test]
    fn toy_vocab_is_64_words() {
        assert_eq!(Tokenizer::toy().vocab_size(), 64);
    }

    #[test]
    fn specials_present() {
        let tok = Tokenizer::toy();
        for s in SPECIALS {
            assert!(tok.id(s).is_some(), "missing {s}");
        }
    }
}
