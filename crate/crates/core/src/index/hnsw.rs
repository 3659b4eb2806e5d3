//! Hierarchical navigable small-world graph over inner-product similarity.
//!
//! Distances are negated dot products, so "closer" means a larger score.
//! Neighbour lists are chosen with the diversity heuristic and topped up with
//! the best pruned candidates. Levels are drawn from a seeded ChaCha stream
//! whose position is persisted, so a reloaded index keeps inserting exactly as
//! the original would have.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::embed::EmbeddingVector;
use crate::error::{Error, Result};

use super::{check_k, dot, top_k, Hit, RetrievedSet};

const MAX_LEVEL: usize = 31;
const NO_ENTRY: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HnswParams {
    /// Maximum neighbours per node on upper layers; layer 0 allows twice as many.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 32,
            ef_construction: 200,
            ef_search: 128,
            seed: 0,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.ef_construction == 0 || self.ef_search == 0 {
            return Err(Error::InvalidArgument(format!(
                "hnsw params need m >= 2 and positive ef values, got {self:?}"
            )));
        }
        Ok(())
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.len_u32(self.m);
        w.len_u32(self.ef_construction);
        w.len_u32(self.ef_search);
        w.u64(self.seed);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        Ok(HnswParams {
            m: r.len()?,
            ef_construction: r.len()?,
            ef_search: r.len()?,
            seed: r.u64()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    score: f32,
    idx: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Graph {
    /// `links[node][layer]`.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
    rng: ChaCha8Rng,
}

impl Graph {
    fn new(seed: u64) -> Self {
        Graph {
            links: Vec::new(),
            entry: None,
            max_level: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn write(&self, w: &mut Writer, seed: u64) {
        w.u32(self.entry.unwrap_or(NO_ENTRY));
        w.len_u32(self.max_level);
        w.u64(seed);
        let pos = self.rng.get_word_pos();
        w.u64(pos as u64);
        w.u64((pos >> 64) as u64);
        for layers in &self.links {
            w.u8(layers.len() as u8);
            for nbrs in layers {
                w.len_u32(nbrs.len());
                w.u32s(nbrs);
            }
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>, n: usize) -> Result<Self> {
        let entry = match r.u32()? {
            NO_ENTRY => None,
            e => Some(e),
        };
        let max_level = r.len()?;
        let seed = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(lo | (hi << 64));
        let mut links = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let layers = r.u8()? as usize;
            let mut node = Vec::with_capacity(layers);
            for _ in 0..layers {
                let c = r.len()?;
                node.push(r.u32s(c)?);
            }
            links.push(node);
        }
        let bad = |m: &str| Error::Format(format!("corrupt hnsw graph: {m}"));
        if entry.is_some_and(|e| e as usize >= n) || (entry.is_none() && n > 0) {
            return Err(bad("entry point"));
        }
        if links.iter().flatten().flatten().any(|&nb| nb as usize >= n) {
            return Err(bad("neighbour out of range"));
        }
        Ok(Graph {
            links,
            entry,
            max_level,
            rng,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    dim: usize,
    params: HnswParams,
    ids: Vec<String>,
    vectors: Vec<f32>,
    graph: Graph,
}

impl HnswIndex {
    pub fn new(dim: usize, params: HnswParams) -> Result<Self> {
        params.validate()?;
        Ok(HnswIndex {
            dim,
            params,
            ids: Vec::new(),
            vectors: Vec::new(),
            graph: Graph::new(params.seed),
        })
    }

    pub fn build<'a>(
        dim: usize,
        params: HnswParams,
        items: impl IntoIterator<Item = (&'a str, &'a EmbeddingVector)>,
    ) -> Result<Self> {
        let mut index = HnswIndex::new(dim, params)?;
        for (id, v) in items {
            index.insert(id, v)?;
        }
        Ok(index)
    }

    pub(crate) fn from_parts(
        dim: usize,
        params: HnswParams,
        graph: Graph,
        ids: Vec<String>,
        vectors: Vec<f32>,
    ) -> Result<Self> {
        params.validate()?;
        if vectors.len() != ids.len() * dim || graph.links.len() != ids.len() {
            return Err(Error::Format(
                "hnsw index blocks disagree on node count".into(),
            ));
        }
        Ok(HnswIndex {
            dim,
            params,
            ids,
            vectors,
            graph,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub(crate) fn raw_vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub(crate) fn write_graph(&self, w: &mut Writer) {
        self.graph.write(w, self.params.seed);
    }

    fn vector(&self, idx: u32) -> &[f32] {
        let start = idx as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    fn random_level(&mut self) -> usize {
        let ml = 1.0 / (self.params.m as f64).ln();
        let u = 1.0 - self.graph.rng.gen::<f64>();
        ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL)
    }

    pub fn insert(&mut self, id: &str, v: &EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.dim(),
                context: Some(format!("inserting {id:?}")),
            });
        }
        let idx = u32::try_from(self.ids.len())
            .ok()
            .filter(|&i| i != NO_ENTRY)
            .ok_or_else(|| Error::InvalidArgument("hnsw index is full".into()))?;
        let level = self.random_level();
        self.ids.push(id.to_string());
        self.vectors.extend_from_slice(v.as_slice());
        self.graph.links.push(vec![Vec::new(); level + 1]);

        let Some(entry) = self.graph.entry else {
            self.graph.entry = Some(idx);
            self.graph.max_level = level;
            return Ok(());
        };

        let q = v.as_slice();
        let mut eps = vec![Cand {
            score: dot(q, self.vector(entry)),
            idx: entry,
        }];
        let top = self.graph.max_level;
        for layer in (level + 1..=top).rev() {
            eps = self.search_layer(q, &eps, 1, layer);
        }
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(q, &eps, self.params.ef_construction, layer);
            let chosen = self.select_neighbors(q, &found, self.params.m);
            for &nb in &chosen {
                self.link(nb, idx, layer);
            }
            self.graph.links[idx as usize][layer] = chosen;
            eps = found;
        }
        if level > top {
            self.graph.entry = Some(idx);
            self.graph.max_level = level;
        }
        Ok(())
    }

    fn link(&mut self, from: u32, to: u32, layer: usize) {
        let cap = if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        };
        self.graph.links[from as usize][layer].push(to);
        if self.graph.links[from as usize][layer].len() <= cap {
            return;
        }
        let base = self.vector(from);
        let mut cands: Vec<Cand> = self.graph.links[from as usize][layer]
            .iter()
            .map(|&nb| Cand {
                score: dot(base, self.vector(nb)),
                idx: nb,
            })
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(base, &cands, cap);
        self.graph.links[from as usize][layer] = kept;
    }

    /// Diversity heuristic: a candidate is kept when no already-selected
    /// neighbour is more similar to it than the base is. Pruned candidates
    /// fill any remaining slots in rank order. `cands` must be best-first.
    fn select_neighbors(&self, _base: &[f32], cands: &[Cand], m: usize) -> Vec<u32> {
        let mut selected: Vec<Cand> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for &c in cands {
            if selected.len() >= m {
                break;
            }
            let cv = self.vector(c.idx);
            if selected
                .iter()
                .all(|s| dot(cv, self.vector(s.idx)) <= c.score)
            {
                selected.push(c);
            } else {
                pruned.push(c);
            }
        }
        let mut out: Vec<u32> = selected.iter().map(|c| c.idx).collect();
        out.extend(pruned.iter().take(m - out.len()).map(|c| c.idx));
        out
    }

    /// Best-first beam search within one layer; returns up to `ef` nodes best-first.
    fn search_layer(&self, q: &[f32], eps: &[Cand], ef: usize, layer: usize) -> Vec<Cand> {
        let mut visited = vec![false; self.ids.len()];
        let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
        let mut best: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        for &e in eps {
            if !std::mem::replace(&mut visited[e.idx as usize], true) {
                frontier.push(e);
                best.push(Reverse(e));
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(c) = frontier.pop() {
            let worst = best.peek().expect("non-empty").0;
            if best.len() >= ef && c < worst {
                break;
            }
            let Some(nbrs) = self.graph.links[c.idx as usize].get(layer) else {
                continue;
            };
            for &nb in nbrs {
                if std::mem::replace(&mut visited[nb as usize], true) {
                    continue;
                }
                let cand = Cand {
                    score: dot(q, self.vector(nb)),
                    idx: nb,
                };
                if best.len() < ef || cand > best.peek().expect("non-empty").0 {
                    frontier.push(cand);
                    best.push(Reverse(cand));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = best.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    pub fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        ef_search: usize,
    ) -> Result<RetrievedSet> {
        check_k(k)?;
        if ef_search < k {
            return Err(Error::InvalidArgument(format!(
                "ef_search ({ef_search}) must be at least k ({k})"
            )));
        }
        if query.dim() != self.dim {
            return Err(Error::dim(self.dim, query.dim()));
        }
        let Some(entry) = self.graph.entry else {
            return Ok(RetrievedSet {
                entries: Vec::new(),
                k,
            });
        };
        let q = query.as_slice();
        let mut eps = vec![Cand {
            score: dot(q, self.vector(entry)),
            idx: entry,
        }];
        for layer in (1..=self.graph.max_level).rev() {
            eps = self.search_layer(q, &eps, 1, layer);
        }
        let found = self.search_layer(q, &eps, ef_search, 0);
        let hits = found
            .into_iter()
            .map(|c| Hit {
                passage_id: self.ids[c.idx as usize].clone(),
                score: c.score,
            })
            .collect();
        Ok(top_k(hits, k))
    }

    /// Exhaustive scan over the stored vectors.
    pub fn exact_search(&self, query: &EmbeddingVector, k: usize) -> Result<RetrievedSet> {
        check_k(k)?;
        if query.dim() != self.dim {
            return Err(Error::dim(self.dim, query.dim()));
        }
        let q = query.as_slice();
        let hits = (0..self.ids.len())
            .map(|i| Hit {
                passage_id: self.ids[i].clone(),
                score: dot(q, self.vector(i as u32)),
            })
            .collect();
        Ok(top_k(hits, k))
    }
}
