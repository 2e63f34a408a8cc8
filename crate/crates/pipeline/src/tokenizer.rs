//! Whitespace and punctuation tokenizer with a closed vocabulary.

use std::collections::HashMap;

use tinydrive_core::seq_model::{EOS, PAD, UNK};

use crate::error::{PipelineError, Result};

pub const SPECIALS: [&str; 3] = ["<pad>", "</s>", "<unk>"];

/// Lowercased words, with every ASCII punctuation character split off as
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then the corpus tokens in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut v = Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()))?;
        for text in texts {
            for t in tokenize(text) {
                if !v.index.contains_key(&t) {
                    v.index.insert(t.clone(), v.tokens.len());
                    v.tokens.push(t);
                }
            }
        }
        if v.tokens.len() == SPECIALS.len() {
            return Err(PipelineError::Dataset("cannot build a vocabulary from an empty corpus".into()));
        }
        Ok(v)
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < SPECIALS.len() || tokens[..3].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(PipelineError::Dataset("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(PipelineError::Dataset(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Token ids truncated to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        tokenize(text).iter().take(max_len).map(|t| self.id(t)).collect()
    }

    /// Ids padded or truncated to exactly `len`, with the real-token mask.
    pub fn encode_padded(&self, text: &str, len: usize) -> (Vec<usize>, Vec<bool>) {
        let mut ids = self.encode(text, len);
        let mut mask = vec![true; ids.len()];
        ids.resize(len, PAD);
        mask.resize(len, false);
        (ids, mask)
    }

    /// Answer ids followed by the end token, `max_len` in total at most.
    pub fn encode_target(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids = self.encode(text, max_len.saturating_sub(1));
        ids.push(EOS);
        ids
    }

    /// Joins tokens with single spaces, skipping padding and stopping at
    /// the end token.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD)
            .map(|&i| self.tokens.get(i).map_or(SPECIALS[UNK], String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
