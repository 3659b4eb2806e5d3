//! End-to-end steps shared by the command-line tool and the tests: ingest,
//! index, retrieve, train, answer and evaluate.
//!
//! Each `cmd_*` function reads its inputs from the paths in a
//! [`PipelineConfig`], writes its artifacts under `paths.output`, and returns
//! a small summary. Artifacts carry no timestamps, so identical configs
//! produce identical bytes.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Backend, DecodingConfig, PipelineConfig, Provider, Strategy};
use crate::corpus::{self, ingest_passages, ingest_qa, Corpus, Passage, QaExample};
use crate::decode::{
    beam_search, ensemble_select, greedy_decode, normalize_answer, AnswerCandidate, FidStep,
    PassageScore, Prediction,
};
use crate::embed::{
    encode_passages, encode_query, load_embeddings, Encoder, HashedEncoder, RetrievalQuery,
    StoredEmbeddings,
};
use crate::fid::{
    build_input, load_checkpoint, save_checkpoint, train, words, FidModel, InputSequence,
    ModelConfig, OptimizerConfig, Real, Tokenizer, TrainExample, EOS,
};
use crate::index::{recall, FlatIndex, HnswIndex, RetrievalRecord, VectorIndex};
use crate::metrics::{evaluate, EvalReport, RetrievalInput};
use crate::{Error, Result};

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::NotFound(path.display().to_string()))
    }
}

/// Loads the persisted corpus when present, otherwise ingests the passage file.
pub fn load_corpus(cfg: &PipelineConfig) -> Result<Corpus> {
    let store = cfg.paths.store();
    if store.exists() {
        Corpus::reload(&store)
    } else {
        ingest_passages(&cfg.paths.corpus)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub passages: usize,
    pub train_questions: Option<usize>,
    pub questions: Option<usize>,
}

impl fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} passages", self.passages)?;
        if let Some(n) = self.train_questions {
            write!(f, ", {n} training questions")?;
        }
        if let Some(n) = self.questions {
            write!(f, ", {n} questions")?;
        }
        Ok(())
    }
}

/// Validates the input files and persists the corpus store.
pub fn cmd_ingest(cfg: &PipelineConfig) -> Result<IngestSummary> {
    let corpus = ingest_passages(&cfg.paths.corpus)?;
    corpus.persist(&cfg.paths.store())?;
    let count = |p: &Path| -> Result<Option<usize>> {
        if p.exists() {
            Ok(Some(ingest_qa(p)?.len()))
        } else {
            Ok(None)
        }
    };
    Ok(IngestSummary {
        passages: corpus.len(),
        train_questions: count(&cfg.paths.train)?,
        questions: count(&cfg.paths.qa)?,
    })
}

fn passage_encoder(cfg: &PipelineConfig) -> Result<Box<dyn Encoder>> {
    match cfg.retrieval.provider {
        Provider::Hashed => Ok(Box::new(HashedEncoder::new(cfg.retrieval.hash_dim)?)),
        Provider::File => {
            let path =
                cfg.paths.embeddings.as_ref().ok_or_else(|| {
                    Error::Config("the file provider needs paths.embeddings".into())
                })?;
            Ok(Box::new(load_embeddings(path)?))
        }
    }
}

fn query_encoder(cfg: &PipelineConfig) -> Result<Box<dyn Encoder>> {
    match cfg.retrieval.provider {
        Provider::Hashed => Ok(Box::new(HashedEncoder::new(cfg.retrieval.hash_dim)?)),
        Provider::File => {
            let path = cfg.paths.query_embeddings.as_ref().ok_or_else(|| {
                Error::Config("the file provider needs paths.query_embeddings".into())
            })?;
            Ok(Box::new(load_embeddings(path)?))
        }
    }
}

/// Builds the configured index kind over `corpus`.
pub fn build_index(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    encoder: &dyn Encoder,
) -> Result<VectorIndex> {
    let vectors = encode_passages(encoder, corpus.passages())?;
    let items = corpus.iter().map(|p| p.id.as_str()).zip(vectors.iter());
    Ok(match cfg.retrieval.backend {
        Backend::Flat => VectorIndex::Flat(FlatIndex::build(encoder.dim(), items)?),
        Backend::Hnsw => {
            VectorIndex::Hnsw(HnswIndex::build(encoder.dim(), cfg.hnsw_params(), items)?)
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexSummary {
    pub count: usize,
    pub dim: usize,
    pub backend: Backend,
}

impl fmt::Display for IndexSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} index: {} vectors of dim {}",
            self.backend, self.count, self.dim
        )
    }
}

/// Encodes every passage and persists the index (and, for the hashed
/// provider, the passage embeddings).
pub fn cmd_build_index(cfg: &PipelineConfig) -> Result<IndexSummary> {
    let corpus = load_corpus(cfg)?;
    let encoder = passage_encoder(cfg)?;
    if cfg.retrieval.provider == Provider::Hashed {
        let vectors = encode_passages(encoder.as_ref(), corpus.passages())?;
        let records = corpus
            .iter()
            .zip(vectors)
            .map(|(p, v)| (p.id.clone(), v.into_vec()))
            .collect();
        StoredEmbeddings::from_records(records)?.save(&cfg.paths.passage_embeddings())?;
    }
    let index = build_index(cfg, &corpus, encoder.as_ref())?;
    index.save(&cfg.paths.index())?;
    Ok(IndexSummary {
        count: index.len(),
        dim: index.dim(),
        backend: cfg.retrieval.backend,
    })
}

/// Top-`k` passages for every question, in question order.
pub fn retrieve(
    index: &VectorIndex,
    encoder: &dyn Encoder,
    questions: &[QaExample],
    k: usize,
) -> Result<Vec<RetrievalRecord>> {
    if k > index.len() {
        warn!(
            "k={k} exceeds the {} indexed passages; returning all of them",
            index.len()
        );
    }
    questions
        .iter()
        .map(|q| {
            let query = RetrievalQuery::new(
                q.question_id.clone(),
                q.question.clone(),
                q.visual.caption.clone(),
            );
            let v = encode_query(encoder, &query)?;
            let found = index.search(&v, k)?;
            Ok(RetrievalRecord {
                question_id: q.question_id.clone(),
                passages: found.entries,
            })
        })
        .collect()
}

/// Mean recall of `records` against exact search over the same index.
pub fn recall_against_exact(
    index: &VectorIndex,
    encoder: &dyn Encoder,
    questions: &[QaExample],
    k: usize,
) -> Result<f64> {
    if questions.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for q in questions {
        let query = RetrievalQuery::new(
            q.question_id.clone(),
            q.question.clone(),
            q.visual.caption.clone(),
        );
        let v = encode_query(encoder, &query)?;
        total += recall(&index.search(&v, k)?, &index.exact_search(&v, k)?);
    }
    Ok(total / questions.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieveSummary {
    pub questions: usize,
    pub train_questions: Option<usize>,
    pub k: usize,
    /// Recall of the approximate index against exact search, when checked.
    pub recall: Option<f64>,
}

impl fmt::Display for RetrieveSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "retrieved top-{} for {} questions",
            self.k, self.questions
        )?;
        if let Some(n) = self.train_questions {
            write!(f, " and {n} training questions")?;
        }
        if let Some(r) = self.recall {
            write!(f, "; recall@{} vs exact search {r:.4}", self.k)?;
        }
        Ok(())
    }
}

/// Writes `retrieval.jsonl` for the evaluation questions and, when a
/// training file exists, `train_retrieval.jsonl`.
pub fn cmd_retrieve(cfg: &PipelineConfig) -> Result<RetrieveSummary> {
    let index_path = cfg.paths.index();
    require(&index_path)?;
    let index = VectorIndex::load(&index_path)?;
    let encoder = query_encoder(cfg)?;
    let k = cfg.retrieval.k;
    let qa = ingest_qa(&cfg.paths.qa)?;
    let records = retrieve(&index, encoder.as_ref(), &qa, k)?;
    corpus::write_jsonl(&cfg.paths.retrieval(), &records)?;

    let mut train_questions = None;
    if cfg.paths.train.exists() {
        let train = ingest_qa(&cfg.paths.train)?;
        let records = retrieve(&index, encoder.as_ref(), &train, k)?;
        corpus::write_jsonl(&cfg.paths.train_retrieval(), &records)?;
        train_questions = Some(train.len());
    }
    let recall = match &index {
        VectorIndex::Hnsw(_) if index.len() <= cfg.retrieval.recall_check_limit => {
            Some(recall_against_exact(&index, encoder.as_ref(), &qa, k)?)
        }
        _ => None,
    };
    Ok(RetrieveSummary {
        questions: qa.len(),
        train_questions,
        k: k.min(index.len()),
        recall,
    })
}

/// Vocabulary over the passage texts and the training questions and answers.
pub fn build_tokenizer(corpus: &Corpus, train: &[QaExample], cap: usize) -> Tokenizer {
    let mut texts: Vec<String> = corpus
        .iter()
        .map(|p| format!("{} {}", p.title, p.body))
        .collect();
    for q in train {
        texts.push(q.question.clone());
        texts.push(q.visual.as_text());
        texts.extend(q.annotated_answers.iter().cloned());
    }
    // Input scaffolding words must always be known.
    texts.push("question: title: context:".into());
    Tokenizer::build(texts.iter().map(String::as_str), Some(cap))
}

/// Most frequent annotated answer; the earliest wins ties.
pub fn majority_answer(q: &QaExample) -> Option<&str> {
    let mut best: Option<(&str, usize)> = None;
    for a in &q.annotated_answers {
        let n = q.annotated_answers.iter().filter(|b| *b == a).count();
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((a, n));
        }
    }
    best.map(|(a, _)| a)
}

/// One encoder input per passage.
pub fn reader_inputs(
    tokenizer: &Tokenizer,
    q: &QaExample,
    passages: &[&Passage],
    max_len: usize,
) -> Vec<InputSequence> {
    passages
        .iter()
        .map(|p| build_input(tokenizer, &q.question, &q.visual, p, max_len))
        .collect()
}

/// Target ids for `answer`: tokens truncated to leave room for EOS.
pub fn answer_target(tokenizer: &Tokenizer, answer: &str, max_decode_len: usize) -> Vec<u32> {
    let mut ids = tokenizer.encode(answer);
    ids.truncate(max_decode_len.saturating_sub(1));
    ids.push(EOS);
    ids
}

/// Passages for `q`: its own `passages` field when present, otherwise its
/// retrieval record; at most `n`.
pub fn passages_for<'a>(
    corpus: &'a Corpus,
    q: &QaExample,
    retrieved: &HashMap<&str, &RetrievalRecord>,
    n: usize,
) -> Result<Vec<&'a Passage>> {
    let ids: Vec<&str> = match (&q.passages, retrieved.get(q.question_id.as_str())) {
        (Some(own), _) => own.iter().map(String::as_str).collect(),
        (None, Some(rec)) => rec.passages.iter().map(|h| h.passage_id.as_str()).collect(),
        (None, None) => {
            return Err(Error::NotFound(format!(
                "retrieved passages for question {}",
                q.question_id
            )))
        }
    };
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "question {} has no passages",
            q.question_id
        )));
    }
    ids.into_iter()
        .take(n)
        .map(|id| corpus.lookup(id))
        .collect()
}

fn by_question(records: &[RetrievalRecord]) -> HashMap<&str, &RetrievalRecord> {
    records
        .iter()
        .map(|r| (r.question_id.as_str(), r))
        .collect()
}

/// Rewrites `text` word by word, replacing each occurrence of a `from`
/// word sequence by its `to` sequence. Earlier pairs win at a position.
pub fn rename_words(text: &str, map: &[(Vec<String>, Vec<String>)]) -> String {
    let w = words(text);
    let mut out: Vec<&str> = Vec::with_capacity(w.len());
    let mut i = 0;
    'scan: while i < w.len() {
        for (from, to) in map {
            if !from.is_empty() && w[i..].starts_with(from) {
                out.extend(to.iter().map(String::as_str));
                i += from.len();
                continue 'scan;
            }
        }
        out.push(&w[i]);
        i += 1;
    }
    out.join(" ")
}

/// A copy of `q` and its passages in which every passage title is replaced,
/// wherever it occurs, by a different title drawn from `corpus`. Titles
/// that occur inside `answer` are left alone.
pub fn swap_titles(
    corpus: &Corpus,
    q: &QaExample,
    passages: &[&Passage],
    answer: &str,
    rng: &mut impl Rng,
) -> (QaExample, Vec<Passage>) {
    let answer_words = words(answer);
    let mut own: Vec<Vec<String>> = passages.iter().map(|p| words(&p.title)).collect();
    own.sort();
    own.dedup();
    own.retain(|t| !t.is_empty() && !answer_words.windows(t.len()).any(|w| w == t.as_slice()));
    // Longest first, so a title containing another is matched whole.
    own.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));

    let mut used: Vec<Vec<String>> = passages.iter().map(|p| words(&p.title)).collect();
    let mut map = Vec::with_capacity(own.len());
    for from in own {
        // A corpus smaller than the passage list can run out of fresh titles.
        let to = (0..32)
            .map(|_| words(&corpus.passages()[rng.gen_range(0..corpus.len())].title))
            .find(|t| !t.is_empty() && !used.contains(t));
        if let Some(to) = to {
            used.push(to.clone());
            map.push((from, to));
        }
    }
    let mut renamed = q.clone();
    renamed.question = rename_words(&q.question, &map);
    renamed.visual.caption = rename_words(&q.visual.caption, &map);
    renamed.visual.dense_labels = q
        .visual
        .dense_labels
        .iter()
        .map(|l| rename_words(l, &map))
        .collect();
    renamed.visual.ocr = q.visual.ocr.iter().map(|l| rename_words(l, &map)).collect();
    let ps = passages
        .iter()
        .map(|p| {
            Passage::new(
                p.id.clone(),
                rename_words(&p.title, &map),
                rename_words(&p.body, &map),
            )
        })
        .collect();
    (renamed, ps)
}

/// How [`training_examples`] picks and augments passages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExampleOptions {
    pub passages: usize,
    /// Move the first passage containing the answer to the front before
    /// truncating to `passages`.
    pub answer_first: bool,
    pub title_swaps: usize,
    pub seed: u64,
}

/// Teacher-forcing examples for every annotated training question, each
/// followed by `title_swaps` renamed copies (see [`swap_titles`]).
pub fn training_examples(
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    questions: &[QaExample],
    retrieval: &[RetrievalRecord],
    model: &ModelConfig,
    opts: ExampleOptions,
) -> Result<Vec<TrainExample>> {
    let retrieved = by_question(retrieval);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for q in questions {
        let Some(answer) = majority_answer(q) else {
            warn!(
                "training question {} has no answers and is skipped",
                q.question_id
            );
            continue;
        };
        let mut ps = passages_for(corpus, q, &retrieved, usize::MAX)?;
        if opts.answer_first {
            let a = normalize_answer(answer);
            if let Some(pos) = ps
                .iter()
                .position(|p| normalize_answer(&p.full_text()).contains(a.as_str()))
            {
                let p = ps.remove(pos);
                ps.insert(0, p);
            }
        }
        ps.truncate(opts.passages);
        let target = answer_target(tokenizer, answer, model.max_decode_len);
        out.push(TrainExample {
            inputs: reader_inputs(tokenizer, q, &ps, model.max_input_len),
            target: target.clone(),
        });
        for _ in 0..opts.title_swaps {
            let (q2, ps2) = swap_titles(corpus, q, &ps, answer, &mut rng);
            let refs: Vec<&Passage> = ps2.iter().collect();
            out.push(TrainExample {
                inputs: reader_inputs(tokenizer, &q2, &refs, model.max_input_len),
                target: target.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub examples: usize,
    pub steps: usize,
    pub vocab_size: usize,
    pub parameters: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trained {} steps on {} examples ({} parameters, vocab {})",
            self.steps, self.examples, self.parameters, self.vocab_size
        )?;
        if let (Some(a), Some(b)) = (self.first_loss, self.final_loss) {
            write!(f, "; loss {a:.4} -> {b:.4}")?;
        }
        Ok(())
    }
}

/// Trains a reader from `cfg` and returns it with its tokenizer and losses.
pub fn train_reader(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    questions: &[QaExample],
    retrieval: &[RetrievalRecord],
) -> Result<(FidModel<f32>, Tokenizer, Vec<f64>)> {
    let tokenizer = build_tokenizer(corpus, questions, cfg.model.vocab_size);
    let model_cfg = ModelConfig {
        vocab_size: tokenizer.len(),
        ..cfg.model_config()
    };
    let mut opts = ExampleOptions {
        passages: 1,
        answer_first: true,
        title_swaps: cfg.training.title_swaps,
        seed: cfg.title_swap_seed(),
    };
    let mut model = FidModel::<f32>::new(model_cfg.clone())?;
    let mut losses = Vec::new();
    let first = cfg.training.answer_passage_steps;
    if first > 0 {
        let data = training_examples(&tokenizer, corpus, questions, retrieval, &model_cfg, opts)?;
        info!(
            "answer-passage phase: {first} steps on {} examples",
            data.len()
        );
        let optimizer = OptimizerConfig {
            total_steps: first,
            ..cfg.optimizer()
        };
        losses.extend(train(&mut model, &data, &optimizer)?.losses);
    }
    opts.passages = cfg.train_passages();
    opts.answer_first = false;
    let data = training_examples(&tokenizer, corpus, questions, retrieval, &model_cfg, opts)?;
    info!(
        "training on {} examples, {} parameters",
        data.len(),
        model.params().num_parameters()
    );
    let optimizer = OptimizerConfig {
        total_steps: cfg.training.total_steps - first,
        ..cfg.optimizer()
    };
    losses.extend(train(&mut model, &data, &optimizer)?.losses);
    Ok((model, tokenizer, losses))
}

/// Trains on `paths.train` and writes the checkpoint and `losses.tsv`.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    let corpus = load_corpus(cfg)?;
    let questions = ingest_qa(&cfg.paths.train)?;
    let retrieval: Vec<RetrievalRecord> = if questions.iter().all(|q| q.passages.is_some()) {
        Vec::new()
    } else {
        require(&cfg.paths.train_retrieval())?;
        corpus::read_jsonl(&cfg.paths.train_retrieval())?
    };
    let (model, tokenizer, losses) = train_reader(cfg, &corpus, &questions, &retrieval)?;
    save_checkpoint(&cfg.paths.checkpoint(), &model, &tokenizer)?;
    let lines = std::iter::once("step\tloss".to_string()).chain(
        losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{}\t{l:.6}", i + 1)),
    );
    corpus::write_lines(&cfg.paths.losses(), lines)?;
    Ok(TrainSummary {
        examples: questions.iter().filter(|q| q.is_annotated()).count(),
        steps: losses.len(),
        vocab_size: tokenizer.len(),
        parameters: model.params().num_parameters(),
        first_loss: losses.first().copied(),
        final_loss: losses.last().copied(),
    })
}

/// Splits `items` into `n` groups by dealing them round-robin.
pub fn round_robin<T: Copy>(items: &[T], n: usize) -> Vec<Vec<T>> {
    let mut groups = vec![Vec::new(); n.max(1)];
    for (i, &item) in items.iter().enumerate() {
        groups[i % n.max(1)].push(item);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

struct GroupAnswer {
    best: AnswerCandidate,
    beams: Vec<AnswerCandidate>,
    passage_ids: Vec<String>,
}

/// Answers one question from the given passages.
pub fn answer_question<R: Real>(
    model: &FidModel<R>,
    tokenizer: &Tokenizer,
    q: &QaExample,
    passages: &[&Passage],
    decoding: &DecodingConfig,
) -> Result<Prediction> {
    let mut groups = Vec::new();
    for group in round_robin(passages, decoding.ensemble_size) {
        let inputs = reader_inputs(tokenizer, q, &group, model.config().max_input_len);
        let memory = model.prepare(&model.encode_all(&inputs)?);
        let step = FidStep::new(model, &memory);
        let beams = match decoding.strategy {
            Strategy::Greedy => vec![greedy_decode(&step, decoding.max_len)?],
            Strategy::Beam => beam_search(&step, &decoding.beam())?,
        };
        let best = step.attribute(beams[0].clone())?;
        groups.push(GroupAnswer {
            best,
            beams,
            passage_ids: group.iter().map(|p| p.id.clone()).collect(),
        });
    }
    let tops: Vec<AnswerCandidate> = groups.iter().map(|g| g.best.clone()).collect();
    let chosen = &groups[ensemble_select(&tops)?];
    let answer = tokenizer.decode(chosen.best.answer_tokens());
    Ok(Prediction {
        question_id: q.question_id.clone(),
        normalized_answer: normalize_answer(&answer),
        answer,
        token_logprobs: chosen.best.token_logprobs.clone(),
        beam_answers: chosen
            .beams
            .iter()
            .map(|b| tokenizer.decode(b.answer_tokens()))
            .collect(),
        attribution: chosen
            .passage_ids
            .iter()
            .zip(&chosen.best.attribution)
            .map(|(id, &score)| PassageScore {
                passage_id: id.clone(),
                score,
            })
            .collect(),
    })
}

/// Answers every question from its top `passages` retrieved passages.
pub fn answer_all<R: Real>(
    model: &FidModel<R>,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    questions: &[QaExample],
    retrieval: &[RetrievalRecord],
    passages: usize,
    decoding: &DecodingConfig,
) -> Result<Vec<Prediction>> {
    let retrieved = by_question(retrieval);
    questions
        .iter()
        .map(|q| {
            let ps = passages_for(corpus, q, &retrieved, passages)?;
            answer_question(model, tokenizer, q, &ps, decoding)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerSummary {
    pub questions: usize,
}

impl fmt::Display for AnswerSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "answered {} questions", self.questions)
    }
}

/// Writes `predictions.jsonl` for `paths.qa`.
pub fn cmd_answer(cfg: &PipelineConfig) -> Result<AnswerSummary> {
    let ckpt_path = cfg.paths.checkpoint();
    require(&ckpt_path)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    if cfg.decoding.max_len > ckpt.model.config().max_decode_len {
        return Err(Error::Config(format!(
            "decoding.max_len {} exceeds the checkpoint's max_decode_len {}",
            cfg.decoding.max_len,
            ckpt.model.config().max_decode_len
        )));
    }
    let corpus = load_corpus(cfg)?;
    let qa = ingest_qa(&cfg.paths.qa)?;
    let retrieval: Vec<RetrievalRecord> = if qa.iter().all(|q| q.passages.is_some()) {
        Vec::new()
    } else {
        require(&cfg.paths.retrieval())?;
        corpus::read_jsonl(&cfg.paths.retrieval())?
    };
    let predictions = answer_all(
        &ckpt.model,
        &ckpt.tokenizer,
        &corpus,
        &qa,
        &retrieval,
        cfg.answer_passages(),
        &cfg.decoding,
    )?;
    corpus::write_jsonl(&cfg.paths.predictions(), &predictions)?;
    Ok(AnswerSummary {
        questions: predictions.len(),
    })
}

/// Scores `predictions.jsonl` (and `retrieval.jsonl`, when present) against
/// `paths.qa` and writes `report.json`.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<EvalReport> {
    let qa = ingest_qa(&cfg.paths.qa)?;
    let predictions: Vec<Prediction> = if cfg.paths.predictions().exists() {
        corpus::read_jsonl(&cfg.paths.predictions())?
    } else {
        warn!(
            "{} not found; scoring with no predictions",
            cfg.paths.predictions().display()
        );
        Vec::new()
    };
    let retrieval_path = cfg.paths.retrieval();
    let report = if retrieval_path.exists() {
        let records: Vec<RetrievalRecord> = corpus::read_jsonl(&retrieval_path)?;
        let corpus = load_corpus(cfg)?;
        evaluate(
            &predictions,
            &qa,
            Some(RetrievalInput {
                records: &records,
                corpus: &corpus,
            }),
            &cfg.metrics,
        )?
    } else {
        evaluate(&predictions, &qa, None, &cfg.metrics)?
    };
    corpus::write_lines(
        &cfg.paths.report(),
        std::iter::once(report.to_json().trim_end().to_string()),
    )?;
    Ok(report)
}
