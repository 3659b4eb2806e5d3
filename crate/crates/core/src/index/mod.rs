//! Top-k passage retrieval.
//!
//! [`FlatIndex`] is the exact inner-product scan, [`HnswIndex`] the approximate
//! graph index used for large corpora, and [`Bm25Index`] the term-based
//! baseline. Every searcher returns a [`RetrievedSet`] ordered by descending
//! score with ties broken by ascending passage id.

mod bm25;
mod flat;
mod hnsw;

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bm25::{Bm25Index, BM25_B, BM25_K1};
pub use flat::FlatIndex;
pub use hnsw::{HnswIndex, HnswParams};

use crate::binio::{self, Reader, Writer};
use crate::embed::EmbeddingVector;
use crate::error::{Error, Result};

const INDEX_MAGIC: &[u8; 4] = b"FQIX";
const INDEX_VERSION: u32 = 1;
const METRIC_INNER_PRODUCT: u8 = 0;
const KIND_FLAT: u8 = 0;
const KIND_HNSW: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub passage_id: String,
    pub score: f32,
}

/// One line of a retrieval file: ranked passages for a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub question_id: String,
    pub passages: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievedSet {
    pub entries: Vec<Hit>,
    pub k: usize,
}

impl RetrievedSet {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|h| h.passage_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Dot product accumulated in `f64` in index order, rounded to `f32`.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f32> {
    if a.dim() != b.dim() {
        return Err(Error::dim(a.dim(), b.dim()));
    }
    Ok(dot(a.as_slice(), b.as_slice()))
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc as f32
}

/// Descending score, then ascending id.
pub(crate) fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.passage_id.cmp(&b.passage_id))
}

/// Keeps the best `k` hits in rank order.
pub(crate) fn top_k(mut hits: Vec<Hit>, k: usize) -> RetrievedSet {
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_by(rank_order);
    RetrievedSet { entries: hits, k }
}

pub(crate) fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    Ok(())
}

/// A persisted dense index of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum VectorIndex {
    Flat(FlatIndex),
    Hnsw(HnswIndex),
}

impl VectorIndex {
    pub fn dim(&self) -> usize {
        match self {
            VectorIndex::Flat(i) => i.dim(),
            VectorIndex::Hnsw(i) => i.dim(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VectorIndex::Flat(i) => i.len(),
            VectorIndex::Hnsw(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Searches with the index's own `ef_search` for HNSW, raised to `k` when smaller.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<RetrievedSet> {
        match self {
            VectorIndex::Flat(i) => i.search(query, k),
            VectorIndex::Hnsw(i) => i.search(query, k, i.params().ef_search.max(k)),
        }
    }

    /// Exact search over the stored vectors regardless of index kind.
    pub fn exact_search(&self, query: &EmbeddingVector, k: usize) -> Result<RetrievedSet> {
        match self {
            VectorIndex::Flat(i) => i.search(query, k),
            VectorIndex::Hnsw(i) => i.exact_search(query, k),
        }
    }

    /// Serializes to the index file layout: magic `FQIX`, `u32` version, `u8`
    /// kind, `u8` metric tag, `u32` dim, params, `u64` node count, adjacency
    /// lists, vectors as little-endian `f32`, then the passage ids.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(INDEX_MAGIC, INDEX_VERSION);
        match self {
            VectorIndex::Flat(i) => {
                w.u8(KIND_FLAT);
                w.u8(METRIC_INNER_PRODUCT);
                w.len_u32(i.dim());
                HnswParams::default().write(&mut w);
                w.u64(i.len() as u64);
                w.f32s(i.raw_vectors());
                for id in i.ids() {
                    w.str(id);
                }
            }
            VectorIndex::Hnsw(i) => {
                w.u8(KIND_HNSW);
                w.u8(METRIC_INNER_PRODUCT);
                w.len_u32(i.dim());
                i.params().write(&mut w);
                w.u64(i.len() as u64);
                i.write_graph(&mut w);
                w.f32s(i.raw_vectors());
                for id in i.ids() {
                    w.str(id);
                }
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, INDEX_MAGIC)?;
        binio::expect_version(version, INDEX_VERSION, "index file")?;
        let kind = r.u8()?;
        let metric = r.u8()?;
        if metric != METRIC_INNER_PRODUCT {
            return Err(Error::Format(format!("unknown metric tag {metric}")));
        }
        let dim = r.len()?;
        let params = HnswParams::read(&mut r)?;
        let n = r.u64()? as usize;
        let out = match kind {
            KIND_FLAT => {
                let vectors = r.f32s(n * dim)?;
                let ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
                VectorIndex::Flat(FlatIndex::from_parts(dim, ids, vectors)?)
            }
            KIND_HNSW => {
                let graph = hnsw::Graph::read(&mut r, n)?;
                let vectors = r.f32s(n * dim)?;
                let ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
                VectorIndex::Hnsw(HnswIndex::from_parts(dim, params, graph, ids, vectors)?)
            }
            other => return Err(Error::Format(format!("unknown index kind {other}"))),
        };
        r.finish()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        VectorIndex::from_bytes(&binio::read_file(path)?)
    }
}

/// Fraction of `truth` ids present in `approx`.
pub fn recall(approx: &RetrievedSet, truth: &RetrievedSet) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let found = truth
        .ids()
        .filter(|id| approx.ids().any(|a| a == *id))
        .count();
    found as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(
            similarity(&v(&[0.5, -2.0, 3.0]), &v(&[4.0, 1.0, -1.0])).unwrap(),
            -3.0
        );
        assert!(similarity(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn top_k_breaks_ties_by_id() {
        let hits = ["c", "a", "b"]
            .iter()
            .map(|id| Hit {
                passage_id: id.to_string(),
                score: 1.0,
            })
            .collect();
        let set = top_k(hits, 2);
        assert_eq!(set.ids().collect::<Vec<_>>(), ["a", "b"]);
    }
}
