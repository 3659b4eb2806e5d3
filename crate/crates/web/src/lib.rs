//! Browser demo: a retrieval explorer over a small synthetic knowledge base,
//! an answer scorer, and an HNSW recall curve. The plain functions return
//! JSON strings and are tested natively; the `wasm_bindgen` exports wrap them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use fidqa::corpus::{Corpus, Passage};
use fidqa::decode::normalize_answer;
use fidqa::embed::{encode_passages, EmbeddingVector, HashedEncoder};
use fidqa::index::{recall, Bm25Index, FlatIndex, HnswIndex, HnswParams, RetrievedSet};
use fidqa::metrics::{exact_match, vqa_score, vqa_score_averaged};
use fidqa::synth::{self, SynthConfig};

const DEMO_DIM: usize = 1024;

/// Passages indexed three ways.
pub struct ExplorerState {
    corpus: Corpus,
    encoder: HashedEncoder,
    flat: FlatIndex,
    hnsw: HnswIndex,
    bm25: Bm25Index,
}

impl ExplorerState {
    pub fn new(passages: Vec<Passage>) -> Result<Self, String> {
        let corpus = Corpus::from_passages(passages).map_err(|e| e.to_string())?;
        let encoder = HashedEncoder::new(DEMO_DIM).map_err(|e| e.to_string())?;
        let vectors = encode_passages(&encoder, corpus.passages()).map_err(|e| e.to_string())?;
        let ids: Vec<&str> = corpus.iter().map(|p| p.id.as_str()).collect();
        let flat = FlatIndex::build(DEMO_DIM, ids.iter().copied().zip(&vectors))
            .map_err(|e| e.to_string())?;
        let hnsw = HnswIndex::build(
            DEMO_DIM,
            HnswParams::default(),
            ids.iter().copied().zip(&vectors),
        )
        .map_err(|e| e.to_string())?;
        let bm25 = Bm25Index::build(&corpus);
        Ok(Self {
            corpus,
            encoder,
            flat,
            hnsw,
            bm25,
        })
    }

    /// The default demo corpus: a synthetic knowledge base of `n` passages,
    /// half of them entity descriptions.
    pub fn synthetic(n: usize, seed: u64) -> Result<Self, String> {
        let cfg = SynthConfig {
            passages: n,
            entities: n.div_ceil(2),
            questions: 0,
            train: 0,
            seed,
            ..SynthConfig::default()
        };
        let data = synth::generate(&cfg).map_err(|e| e.to_string())?;
        Self::new(data.passages)
    }

    /// Parses passage JSONL (`{"id", "title", "text"}` per line).
    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let passages = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<Passage>(l).map_err(|e| format!("line {}: {e}", i + 1))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(passages)
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    /// Top-`k` passages for `query` from `backend` (`flat`, `hnsw` or `bm25`), as JSON.
    pub fn search(
        &self,
        query: &str,
        backend: &str,
        k: usize,
        ef_search: usize,
    ) -> Result<String, String> {
        let set = match backend {
            "bm25" => self.bm25.search(query, k),
            "flat" | "hnsw" => {
                let v = self.encoder.encode_text(query);
                if backend == "flat" {
                    self.flat.search(&v, k)
                } else {
                    self.hnsw.search(&v, k, ef_search)
                }
            }
            other => return Err(format!("unknown backend {other:?}")),
        }
        .map_err(|e| e.to_string())?;
        Ok(self.render(&set).to_string())
    }

    fn render(&self, set: &RetrievedSet) -> serde_json::Value {
        let hits: Vec<_> = set
            .entries
            .iter()
            .map(|h| {
                let p = self.corpus.get(&h.passage_id);
                json!({
                    "id": h.passage_id,
                    "score": h.score,
                    "title": p.map(|p| p.title.as_str()),
                    "text": p.map(|p| p.body.as_str()),
                })
            })
            .collect();
        json!(hits)
    }
}

/// EM, VQA score (both variants) and the normalized forms, as JSON.
/// `answers` holds one annotation per line.
pub fn score_answer_json(prediction: &str, answers: &str) -> String {
    let answers: Vec<String> = answers
        .lines()
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(String::from)
        .collect();
    let normalized = normalize_answer(prediction);
    let matches = answers
        .iter()
        .filter(|a| normalize_answer(a) == normalized)
        .count();
    json!({
        "normalized": normalized,
        "matches": matches,
        "annotations": answers.len(),
        "exact_match": exact_match(prediction, &answers),
        "vqa": vqa_score(prediction, &answers),
        "vqa_averaged": vqa_score_averaged(prediction, &answers),
    })
    .to_string()
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingVector {
    let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v
        .iter()
        .map(|x| x * x)
        .sum::<f32>()
        .sqrt()
        .max(f32::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x /= norm);
    EmbeddingVector::new(v).expect("finite")
}

/// Mean recall@`k` of HNSW against exact search for each `ef_search`, over
/// `n` random unit vectors of dimension `dim`, as JSON. Values of
/// `ef_search` below `k` are raised to `k`.
pub fn recall_curve_json(
    n: usize,
    dim: usize,
    m: usize,
    queries: usize,
    k: usize,
    efs: &[usize],
    seed: u64,
) -> Result<String, String> {
    if n == 0 || dim == 0 || queries == 0 {
        return Err("n, dim and queries must be positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors: Vec<EmbeddingVector> = (0..n).map(|_| random_unit(dim, &mut rng)).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
    let params = HnswParams {
        m,
        seed,
        ..HnswParams::default()
    };
    let index = HnswIndex::build(dim, params, ids.iter().map(String::as_str).zip(&vectors))
        .map_err(|e| e.to_string())?;
    let qs: Vec<EmbeddingVector> = (0..queries).map(|_| random_unit(dim, &mut rng)).collect();
    let truth = qs
        .iter()
        .map(|q| index.exact_search(q, k))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let mut points = Vec::new();
    for &ef in efs {
        let ef = ef.max(k);
        let mut total = 0.0;
        for (q, t) in qs.iter().zip(&truth) {
            total += recall(&index.search(q, k, ef).map_err(|e| e.to_string())?, t);
        }
        points.push(json!({ "ef_search": ef, "recall": total / queries as f64 }));
    }
    Ok(json!(points).to_string())
}

#[wasm_bindgen]
pub struct Explorer(ExplorerState);

#[wasm_bindgen]
impl Explorer {
    /// Synthetic corpus of `n` passages.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, seed: u64) -> Result<Explorer, JsError> {
        ExplorerState::synthetic(n, seed)
            .map(Explorer)
            .map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = fromJsonl)]
    pub fn from_jsonl(text: &str) -> Result<Explorer, JsError> {
        ExplorerState::from_jsonl(text)
            .map(Explorer)
            .map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.0.len()
    }

    pub fn search(
        &self,
        query: &str,
        backend: &str,
        k: usize,
        ef_search: usize,
    ) -> Result<String, JsError> {
        self.0
            .search(query, backend, k, ef_search)
            .map_err(|e| JsError::new(&e))
    }
}

#[wasm_bindgen(js_name = scoreAnswer)]
pub fn score_answer(prediction: &str, answers: &str) -> String {
    score_answer_json(prediction, answers)
}

#[wasm_bindgen(js_name = recallCurve)]
pub fn recall_curve(
    n: usize,
    dim: usize,
    m: usize,
    queries: usize,
    k: usize,
    efs: Vec<usize>,
    seed: u64,
) -> Result<String, JsError> {
    recall_curve_json(n, dim, m, queries, k, &efs, seed).map_err(|e| JsError::new(&e))
}
