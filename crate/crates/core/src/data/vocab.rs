//! Word-level tokenizer over a closed synthetic lexicon.
//!
//! Tokenization is orthogonal to what this crate studies, so the vocabulary
//! is a fixed set of template words plus key/value/entity pools. Exact-match
//! scoring stays exact and the models stay tiny.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const DOC_SEP_ID: usize = 2;

pub const PAD_STR: &str = "<pad>";
pub const EOS_STR: &str = "<eos>";
pub const DOC_SEP_STR: &str = "<doc_sep>";

/// Size of each of the key / value / entity pools.
pub const POOL: usize = 64;

const TEMPLATE_WORDS: &[&str] = &[
    "key", "value", "what", "is", "the", "of", "where", "workplace", "works", "in", "located",
];

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// The canonical lexicon shared by every generator and model in this
    /// crate: reserved tokens, template words, then `k*`, `v*`, `e*` pools.
    pub fn synthetic() -> Self {
        let mut words: Vec<String> = vec![PAD_STR.into(), EOS_STR.into(), DOC_SEP_STR.into()];
        words.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        for i in 0..POOL {
            words.push(format!("k{i}"));
        }
        for i in 0..POOL {
            words.push(format!("v{i}"));
        }
        for i in 0..POOL {
            words.push(format!("e{i}"));
        }
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, ids }
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn token_str(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Vocab(format!("token id {id} out of range")))
    }

    /// Whitespace-split tokenization; any word outside the lexicon is an
    /// error rather than an UNK.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Vocab(format!("word {w:?} not in lexicon")))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&id| self.token_str(id)).collect();
        Ok(words?.join(" "))
    }

    pub fn key_word(&self, i: usize) -> String {
        format!("k{i}")
    }

    pub fn value_word(&self, i: usize) -> String {
        format!("v{i}")
    }

    pub fn entity_word(&self, i: usize) -> String {
        format!("e{i}")
    }
}
