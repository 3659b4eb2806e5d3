//! Knowledge-base passages and QA records.
//!
//! Both input formats are JSON lines. Passages carry `id`, `title` and `text`;
//! QA records carry `question_id`, `image_id`, `question`, `caption`,
//! `dense_labels`, `ocr`, and optionally `answers` (exactly ten),
//! `question_type` and `passages` (ids of the passages to read, for training).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

/// Number of human answers attached to every annotated question.
pub const ANSWERS_PER_QUESTION: usize = 10;

const STORE_MAGIC: &[u8; 4] = b"FQCP";
const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    #[serde(rename = "text")]
    pub body: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: impl Into<String>, body: impl Into<String>) -> Self {
        Passage {
            id: id.into(),
            title: title.into(),
            body: body.into(),
        }
    }

    /// Title and body joined by a single space.
    pub fn full_text(&self) -> String {
        join_nonempty([self.title.as_str(), self.body.as_str()])
    }
}

/// Textual surrogate of an image: caption, dense labels and OCR tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualContext {
    pub caption: String,
    pub dense_labels: Vec<String>,
    pub ocr: Vec<String>,
}

impl VisualContext {
    /// Caption, labels and OCR tokens as one space-separated string.
    pub fn as_text(&self) -> String {
        join_nonempty(
            std::iter::once(self.caption.as_str())
                .chain(self.dense_labels.iter().map(String::as_str))
                .chain(self.ocr.iter().map(String::as_str)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaExample {
    pub question_id: String,
    pub image_id: String,
    pub question: String,
    pub visual: VisualContext,
    /// Empty when the record is unannotated, otherwise exactly ten entries.
    pub annotated_answers: Vec<String>,
    pub question_type: Option<String>,
    /// Passage ids to read for this question, when the record fixes them.
    pub passages: Option<Vec<String>>,
}

impl QaExample {
    pub fn is_annotated(&self) -> bool {
        !self.annotated_answers.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QaRecord {
    question_id: String,
    #[serde(default)]
    image_id: String,
    question: String,
    #[serde(default)]
    caption: String,
    #[serde(default)]
    dense_labels: Vec<String>,
    #[serde(default)]
    ocr: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    passages: Option<Vec<String>>,
}

impl QaRecord {
    fn into_example(self) -> Result<QaExample> {
        if self.question.trim().is_empty() {
            return Err(Error::InvalidQuestion {
                question_id: self.question_id,
                message: "empty question".into(),
            });
        }
        let annotated_answers = match self.answers {
            None => Vec::new(),
            Some(a) if a.len() == ANSWERS_PER_QUESTION => a,
            Some(a) => {
                return Err(Error::InvalidQuestion {
                    question_id: self.question_id,
                    message: format!(
                        "expected {ANSWERS_PER_QUESTION} annotated answers, found {}",
                        a.len()
                    ),
                })
            }
        };
        Ok(QaExample {
            question_id: self.question_id,
            image_id: self.image_id,
            question: self.question,
            visual: VisualContext {
                caption: self.caption,
                dense_labels: self.dense_labels,
                ocr: self.ocr,
            },
            annotated_answers,
            question_type: self.question_type,
            passages: self.passages,
        })
    }

    fn from_example(q: &QaExample) -> Self {
        QaRecord {
            question_id: q.question_id.clone(),
            image_id: q.image_id.clone(),
            question: q.question.clone(),
            caption: q.visual.caption.clone(),
            dense_labels: q.visual.dense_labels.clone(),
            ocr: q.visual.ocr.clone(),
            answers: q.is_annotated().then(|| q.annotated_answers.clone()),
            question_type: q.question_type.clone(),
            passages: q.passages.clone(),
        }
    }
}

/// An immutable, ordered passage collection with id lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus, rejecting empty ids or bodies and duplicate ids.
    /// Reported line numbers are 1-based positions in `passages`.
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            validate_passage(p).map_err(|message| Error::Parse {
                path: "<memory>".into(),
                line: i + 1,
                message,
            })?;
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    id: p.id.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Corpus { passages, by_id })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Passage> {
        self.passages.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn lookup(&self, id: &str) -> Result<&Passage> {
        self.get(id).ok_or_else(|| Error::NotFound(id.to_string()))
    }

    /// Position of `id` in file order.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(STORE_MAGIC, STORE_VERSION);
        w.u64(self.passages.len() as u64);
        for p in &self.passages {
            w.str(&p.id);
            w.str(&p.title);
            w.str(&p.body);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, STORE_MAGIC)?;
        binio::expect_version(version, STORE_VERSION, "corpus store")?;
        let n = r.u64()? as usize;
        let mut passages = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = r.str()?;
            let title = r.str()?;
            let body = r.str()?;
            passages.push(Passage { id, title, body });
        }
        r.finish()?;
        Corpus::from_passages(passages)
    }

    /// Writes the binary store: magic `FQCP`, version, `u64` record count,
    /// then per record the length-prefixed id, title and body.
    pub fn persist(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn reload(path: &Path) -> Result<Self> {
        Corpus::from_bytes(&binio::read_file(path)?)
    }
}

fn validate_passage(p: &Passage) -> std::result::Result<(), String> {
    if p.id.is_empty() {
        return Err("empty passage id".into());
    }
    if p.body.trim().is_empty() {
        return Err(format!("passage {:?} has an empty body", p.id));
    }
    Ok(())
}

fn for_each_record(path: &Path, mut f: impl FnMut(usize, &str) -> Result<()>) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        f(i + 1, &line)?;
    }
    Ok(())
}

/// Reads a passage file, one JSON record per line, in file order.
pub fn ingest_passages(path: &Path) -> Result<Corpus> {
    let mut passages = Vec::new();
    let mut by_id = HashMap::new();
    for_each_record(path, |line_no, line| {
        let p: Passage = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        validate_passage(&p).map_err(|message| Error::Parse {
            path: path.into(),
            line: line_no,
            message,
        })?;
        if by_id.insert(p.id.clone(), passages.len()).is_some() {
            return Err(Error::DuplicateId {
                id: p.id,
                line: line_no,
            });
        }
        passages.push(p);
        Ok(())
    })?;
    Ok(Corpus { passages, by_id })
}

/// Reads a QA file. Missing visual fields default to empty.
pub fn ingest_qa(path: &Path) -> Result<Vec<QaExample>> {
    let mut out = Vec::new();
    for_each_record(path, |line_no, line| {
        let rec: QaRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(rec.into_example()?);
        Ok(())
    })?;
    Ok(out)
}

/// Reads any line-delimited JSON file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for_each_record(path, |line_no, line| {
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: line_no,
            message: e.to_string(),
        })?);
        Ok(())
    })?;
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let lines = records
        .iter()
        .map(serde_json::to_string)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(e.to_string()))?;
    write_lines(path, lines.into_iter())
}

pub fn write_passages(path: &Path, passages: &[Passage]) -> Result<()> {
    write_lines(
        path,
        passages.iter().map(|p| serde_json::to_string(p).unwrap()),
    )
}

pub fn write_qa(path: &Path, examples: &[QaExample]) -> Result<()> {
    write_lines(
        path,
        examples
            .iter()
            .map(|q| serde_json::to_string(&QaRecord::from_example(q)).unwrap()),
    )
}

pub(crate) fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::new();
    for line in lines {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub(crate) fn join_nonempty<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for part in parts {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(part);
    }
    out
}
