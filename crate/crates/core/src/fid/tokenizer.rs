//! Lowercase word-level tokenizer.
//!
//! Text is lowercased and split on whitespace; within each chunk, runs of
//! alphanumeric characters form one token and every other character is a
//! token of its own, so `"question:"` becomes `["question", ":"]`.

use std::collections::HashMap;

use crate::corpus::{Passage, VisualContext};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut run = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() {
                run.push(ch);
            } else {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                out.push(ch.to_string());
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a vocabulary from `texts`: the special tokens, then words by
    /// descending frequency with ties in lexicographic order. `max_size`
    /// caps the total size including special tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.map_or(usize::MAX, |m| m.saturating_sub(SPECIAL_TOKENS.len()));
        let vocab = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(room).map(|(w, _)| w))
            .collect();
        Tokenizer::from_vocab(vocab)
    }

    /// `vocab` must start with the special tokens.
    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Tokenizer { vocab, index }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Joins the words of non-special ids with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                PAD | BOS | EOS => None,
                _ => self.vocab.get(id as usize).map(String::as_str),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A fixed-length encoder input: the first `len` ids are real tokens, the
/// rest are padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    pub ids: Vec<u32>,
    pub len: usize,
}

impl InputSequence {
    pub fn valid(&self) -> &[u32] {
        &self.ids[..self.len]
    }
}

/// The reader input text:
/// `question: {question} {caption} {labels…} {ocr…} title: {title} context: {body}`,
/// with no separator tokens. Empty fields leave no trace.
pub fn input_text(question: &str, visual: &VisualContext, passage: &Passage) -> String {
    crate::corpus::join_nonempty([
        "question:",
        question,
        &visual.as_text(),
        "title:",
        &passage.title,
        "context:",
        &passage.body,
    ])
}

/// Tokenizes the reader input, truncated and then padded to `max_len`.
pub fn build_input(
    tokenizer: &Tokenizer,
    question: &str,
    visual: &VisualContext,
    passage: &Passage,
    max_len: usize,
) -> InputSequence {
    let mut ids = tokenizer.encode(&input_text(question, visual, passage));
    ids.truncate(max_len);
    let len = ids.len();
    ids.resize(max_len, PAD);
    InputSequence { ids, len }
}
