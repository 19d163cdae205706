//! Word-level text tokenizer: lowercase, whitespace-split, corpus-built vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
/// End of sentence; doubles as the separator closing encoder inputs.
pub const SEP: u32 = 2;
/// Start token for autoregressive decoding.
pub const BOS: u32 = 3;
pub const UNK: u32 = 4;
const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[BOS]", "[UNK]"];

/// Serialized as its word list; the lookup index is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

/// A text together with its word-level ids (no special tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct TextSample {
    pub text: String,
    pub token_ids: Vec<u32>,
}

pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

impl Vocabulary {
    /// Builds a vocabulary over the given texts, words sorted for determinism.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .collect();
        let words = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(&w.to_lowercase())).collect()
    }

    pub fn sample(&self, text: &str) -> Result<TextSample> {
        let token_ids = self.encode(text);
        if token_ids.is_empty() {
            return Err(Error::Invalid("text has no tokens".into()));
        }
        Ok(TextSample { text: text.to_string(), token_ids })
    }

    /// Decodes ids to text, skipping special tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i as usize >= SPECIALS.len() || i == UNK)
            .map(|&i| self.words.get(i as usize).map(String::as_str).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}
