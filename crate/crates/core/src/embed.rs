//! Dense query and passage encoders.
//!
//! Two providers are available: [`HashedEncoder`], a deterministic signed
//! feature-hashing encoder that needs no model, and [`StoredEmbeddings`], which
//! serves vectors computed elsewhere and loaded from an embedding file. Query
//! and passage encoders are separate objects; nothing assumes they are the same.

use std::collections::HashMap;
use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::corpus::{join_nonempty, Passage};
use crate::error::{Error, Result};

const EMBED_MAGIC: &[u8; 4] = b"FQEM";
const EMBED_VERSION: u32 = 1;

pub const DEFAULT_HASH_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding must have dim > 0".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite embedding value at {i}"
            )));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }
}

/// A retrieval query: the question followed by the image caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalQuery {
    /// Key used by file-backed providers (the question id).
    pub id: String,
    pub question: String,
    pub caption: String,
}

impl RetrievalQuery {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        caption: impl Into<String>,
    ) -> Self {
        RetrievalQuery {
            id: id.into(),
            question: question.into(),
            caption: caption.into(),
        }
    }

    pub fn text(&self) -> String {
        join_nonempty([self.question.as_str(), self.caption.as_str()])
    }
}

pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Encodes `text`; file-backed providers look the vector up by `key` instead.
    fn encode(&self, key: &str, text: &str) -> Result<EmbeddingVector>;
}

pub fn encode_query(encoder: &dyn Encoder, query: &RetrievalQuery) -> Result<EmbeddingVector> {
    encoder.encode(&query.id, &query.text())
}

pub fn encode_passage(encoder: &dyn Encoder, passage: &Passage) -> Result<EmbeddingVector> {
    encoder.encode(&passage.id, &passage.full_text())
}

pub fn encode_passages(
    encoder: &dyn Encoder,
    passages: &[Passage],
) -> Result<Vec<EmbeddingVector>> {
    passages
        .iter()
        .map(|p| encode_passage(encoder, p))
        .collect()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const SIGN_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// MurmurHash3 64-bit finalizer.
fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

/// Signed feature hashing over lowercase whitespace tokens.
///
/// For a token with FNV-1a hash `h`, the bucket is `fmix64(h) % dim` and the
/// sign is `+1` when the top bit of `fmix64(h ^ 0x9e3779b97f4a7c15)` is clear,
/// `-1` otherwise. Bucket sums are scaled by `1/sqrt(token count)`; empty text
/// maps to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedEncoder {
    dim: usize,
}

impl HashedEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "hash encoder dim must be > 0".into(),
            ));
        }
        Ok(HashedEncoder { dim })
    }

    pub fn encode_text(&self, text: &str) -> EmbeddingVector {
        let mut acc = vec![0i64; self.dim];
        let mut count = 0usize;
        for token in text.split_whitespace() {
            let token = token.to_lowercase();
            let h = fnv1a64(token.as_bytes());
            let bucket = (fmix64(h) % self.dim as u64) as usize;
            let negative = fmix64(h ^ SIGN_SALT) >> 63 == 1;
            acc[bucket] += if negative { -1 } else { 1 };
            count += 1;
        }
        if count == 0 {
            return EmbeddingVector::zeros(self.dim);
        }
        let scale = 1.0 / (count as f64).sqrt();
        EmbeddingVector {
            values: acc.iter().map(|&c| (c as f64 * scale) as f32).collect(),
        }
    }
}

impl Default for HashedEncoder {
    fn default() -> Self {
        HashedEncoder {
            dim: DEFAULT_HASH_DIM,
        }
    }
}

impl Encoder for HashedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, _key: &str, text: &str) -> Result<EmbeddingVector> {
        Ok(self.encode_text(text))
    }
}

/// Precomputed vectors keyed by passage or question id.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredEmbeddings {
    dim: usize,
    ids: Vec<String>,
    vectors: HashMap<String, EmbeddingVector>,
}

impl StoredEmbeddings {
    pub fn from_records(records: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let dim = records.first().map(|(_, v)| v.len()).unwrap_or(0);
        let mut ids = Vec::with_capacity(records.len());
        let mut vectors = HashMap::with_capacity(records.len());
        for (id, v) in records {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                    context: Some(format!("embedding {id:?}")),
                });
            }
            let v = EmbeddingVector::new(v)
                .map_err(|e| Error::Format(format!("embedding {id:?}: {e}")))?;
            if vectors.insert(id.clone(), v).is_some() {
                return Err(Error::Format(format!("duplicate embedding id {id:?}")));
            }
            ids.push(id);
        }
        Ok(StoredEmbeddings { dim, ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.vectors.get(id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(EMBED_MAGIC, EMBED_VERSION);
        w.len_u32(self.dim);
        w.u64(self.ids.len() as u64);
        for id in &self.ids {
            let v = &self.vectors[id];
            w.str(id);
            w.len_u32(v.dim());
            w.f32s(v.as_slice());
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, EMBED_MAGIC)?;
        binio::expect_version(version, EMBED_VERSION, "embedding file")?;
        let dim = r.len()?;
        let count = r.u64()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = r.str()?;
            let n = r.len()?;
            if n != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: n,
                    context: Some(format!("embedding {id:?}")),
                });
            }
            records.push((id, r.f32s(n)?));
        }
        r.finish()?;
        let mut out = StoredEmbeddings::from_records(records)?;
        out.dim = dim;
        Ok(out)
    }

    /// Writes the embedding file: magic `FQEM`, version, `u32` dim, `u64`
    /// count, then per record a length-prefixed id, `u32` length and the
    /// little-endian `f32` values.
    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }
}

impl Encoder for StoredEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, key: &str, _text: &str) -> Result<EmbeddingVector> {
        self.vectors
            .get(key)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(key.to_string()))
    }
}

pub fn load_embeddings(path: &Path) -> Result<StoredEmbeddings> {
    StoredEmbeddings::from_bytes(&binio::read_file(path)?)
}
