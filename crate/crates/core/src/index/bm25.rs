//! Okapi BM25 over lowercase whitespace tokens of title and body.

use std::collections::HashMap;

use crate::corpus::Corpus;
use crate::error::Result;

use super::{check_k, top_k, Hit, RetrievedSet};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    term_freqs: Vec<HashMap<String, u32>>,
    doc_lens: Vec<usize>,
    doc_freq: HashMap<String, u32>,
    avg_len: f64,
    k1: f64,
    b: f64,
}

pub(crate) fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Bm25Index {
    pub fn build(corpus: &Corpus) -> Self {
        Self::with_params(corpus, BM25_K1, BM25_B)
    }

    pub fn with_params(corpus: &Corpus, k1: f64, b: f64) -> Self {
        let mut ids = Vec::with_capacity(corpus.len());
        let mut term_freqs = Vec::with_capacity(corpus.len());
        let mut doc_lens = Vec::with_capacity(corpus.len());
        let mut doc_freq: HashMap<String, u32> = HashMap::new();
        for p in corpus.iter() {
            let mut tf: HashMap<String, u32> = HashMap::new();
            let mut len = 0;
            for t in tokenize(&p.full_text()) {
                *tf.entry(t).or_default() += 1;
                len += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            ids.push(p.id.clone());
            term_freqs.push(tf);
            doc_lens.push(len);
        }
        let avg_len = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64
        };
        Bm25Index {
            ids,
            term_freqs,
            doc_lens,
            doc_freq,
            avg_len,
            k1,
            b,
        }
    }

    /// `ln(1 + (N - n + 0.5) / (n + 0.5))`, which stays positive for terms
    /// present in every document.
    pub fn idf(&self, term: &str) -> f64 {
        let n = f64::from(self.doc_freq.get(term).copied().unwrap_or(0));
        let total = self.ids.len() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    /// Score of document `doc` (position in corpus order). Repeated query
    /// terms count once.
    pub fn score(&self, query: &str, doc: usize) -> f64 {
        let mut terms: Vec<String> = tokenize(query).collect();
        terms.sort();
        terms.dedup();
        let tf = &self.term_freqs[doc];
        let norm = if self.avg_len > 0.0 {
            1.0 - self.b + self.b * self.doc_lens[doc] as f64 / self.avg_len
        } else {
            1.0
        };
        terms
            .iter()
            .filter_map(|t| tf.get(t).map(|&f| (t, f64::from(f))))
            .map(|(t, f)| self.idf(t) * f * (self.k1 + 1.0) / (f + self.k1 * norm))
            .sum()
    }

    pub fn search(&self, query: &str, k: usize) -> Result<RetrievedSet> {
        check_k(k)?;
        let hits = (0..self.ids.len())
            .map(|i| Hit {
                passage_id: self.ids[i].clone(),
                score: self.score(query, i) as f32,
            })
            .collect();
        Ok(top_k(hits, k))
    }
}
