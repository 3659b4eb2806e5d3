use crate::embed::EmbeddingVector;
use crate::error::{Error, Result};

use super::{check_k, dot, top_k, Hit, RetrievedSet};

/// Exhaustive inner-product search.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
}

impl FlatIndex {
    pub fn new(dim: usize) -> Self {
        FlatIndex {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn build<'a>(
        dim: usize,
        items: impl IntoIterator<Item = (&'a str, &'a EmbeddingVector)>,
    ) -> Result<Self> {
        let mut index = FlatIndex::new(dim);
        for (id, v) in items {
            index.insert(id, v)?;
        }
        Ok(index)
    }

    pub(crate) fn from_parts(dim: usize, ids: Vec<String>, vectors: Vec<f32>) -> Result<Self> {
        if vectors.len() != ids.len() * dim {
            return Err(Error::Format(
                "flat index vector block has wrong length".into(),
            ));
        }
        Ok(FlatIndex { dim, ids, vectors })
    }

    pub fn insert(&mut self, id: &str, v: &EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.dim(),
                context: Some(format!("inserting {id:?}")),
            });
        }
        self.ids.push(id.to_string());
        self.vectors.extend_from_slice(v.as_slice());
        Ok(())
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

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub(crate) fn raw_vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<RetrievedSet> {
        check_k(k)?;
        if query.dim() != self.dim {
            return Err(Error::dim(self.dim, query.dim()));
        }
        let q = query.as_slice();
        let hits = self
            .ids
            .iter()
            .zip(self.vectors.chunks_exact(self.dim.max(1)))
            .map(|(id, v)| Hit {
                passage_id: id.clone(),
                score: dot(q, v),
            })
            .collect();
        Ok(top_k(hits, k))
    }
}
