//! Evaluation: retrieval hit@k, exact match, VQA score, best-of-beams and
//! the aggregate report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Passage, QaExample};
use crate::decode::{normalize_answer, Prediction};
use crate::index::RetrievalRecord;
use crate::{Error, Result};

/// How annotator votes turn into a VQA score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaVariant {
    /// `min(matches / 3, 1)`.
    #[default]
    Simple,
    /// Mean of the simple score over the ten leave-one-annotator-out subsets.
    Averaged,
}

fn match_count(prediction: &str, answers: &[String]) -> usize {
    let p = normalize_answer(prediction);
    answers.iter().filter(|a| normalize_answer(a) == p).count()
}

pub fn exact_match(prediction: &str, answers: &[String]) -> f64 {
    if match_count(prediction, answers) > 0 {
        1.0
    } else {
        0.0
    }
}

pub fn vqa_score(prediction: &str, answers: &[String]) -> f64 {
    (match_count(prediction, answers) as f64 / 3.0).min(1.0)
}

pub fn vqa_score_averaged(prediction: &str, answers: &[String]) -> f64 {
    if answers.is_empty() {
        return 0.0;
    }
    let p = normalize_answer(prediction);
    let hits: Vec<bool> = answers.iter().map(|a| normalize_answer(a) == p).collect();
    let total = hits.iter().filter(|&&h| h).count();
    let sum: f64 = hits
        .iter()
        .map(|&h| ((total - h as usize) as f64 / 3.0).min(1.0))
        .sum();
    sum / answers.len() as f64
}

pub fn vqa_with(variant: VqaVariant, prediction: &str, answers: &[String]) -> f64 {
    match variant {
        VqaVariant::Simple => vqa_score(prediction, answers),
        VqaVariant::Averaged => vqa_score_averaged(prediction, answers),
    }
}

/// Best exact match and VQA score among the first `k` beam answers. `k` is
/// clamped to the number of answers available.
pub fn best_of_beams(
    beam_answers: &[String],
    answers: &[String],
    k: usize,
    variant: VqaVariant,
) -> (f64, f64) {
    beam_answers
        .iter()
        .take(k)
        .fold((0.0, 0.0), |(em, vqa), b| {
            (
                em.max(exact_match(b, answers)),
                vqa.max(vqa_with(variant, b, answers)),
            )
        })
}

/// A question with its ground truth and ranked retrieved passages.
#[derive(Debug, Clone)]
pub struct RetrievalItem<'a> {
    pub question_id: &'a str,
    pub answers: &'a [String],
    pub passages: Vec<&'a Passage>,
}

/// Rank (0-based) of the first passage containing a normalized answer.
/// Answers that normalize to nothing are ignored.
pub fn first_hit(item: &RetrievalItem<'_>) -> Option<usize> {
    let answers: Vec<String> = item
        .answers
        .iter()
        .map(|a| normalize_answer(a))
        .filter(|a| !a.is_empty())
        .collect();
    if answers.is_empty() {
        return None;
    }
    item.passages.iter().position(|p| {
        let text = normalize_answer(&p.full_text());
        answers.iter().any(|a| text.contains(a.as_str()))
    })
}

pub fn hit_at_k(items: &[RetrievalItem<'_>], k: usize) -> Result<f64> {
    if let Some(short) = items.iter().find(|i| i.passages.len() < k) {
        return Err(Error::InvalidArgument(format!(
            "question {} has {} retrieved passages, fewer than k={k}",
            short.question_id,
            short.passages.len()
        )));
    }
    if items.is_empty() {
        return Ok(0.0);
    }
    let hits = items
        .iter()
        .filter(|i| first_hit(i).is_some_and(|r| r < k))
        .count();
    Ok(hits as f64 / items.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub hit_ks: Vec<usize>,
    pub beam_ks: Vec<usize>,
    pub vqa_variant: VqaVariant,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            hit_ks: vec![1, 5, 10, 20, 50, 80, 100],
            beam_ks: vec![1, 2, 3],
            vqa_variant: VqaVariant::Simple,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n: usize,
    pub exact_match: f64,
    pub vqa_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_questions: usize,
    pub exact_match: f64,
    pub vqa_score: f64,
    pub vqa_variant: VqaVariant,
    pub missing_predictions: usize,
    pub hit_at_k: BTreeMap<usize, f64>,
    pub best_of_beams: BTreeMap<usize, Scores>,
    pub per_type: BTreeMap<String, Scores>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text summary for terminals.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "questions     {}", self.n_questions);
        let _ = writeln!(out, "exact match   {:.2}", 100.0 * self.exact_match);
        let _ = writeln!(out, "VQA score     {:.2}", 100.0 * self.vqa_score);
        if !self.hit_at_k.is_empty() {
            let head: Vec<String> = self
                .hit_at_k
                .keys()
                .map(|k| format!("{:>7}", format!("@{k}")))
                .collect();
            let vals: Vec<String> = self
                .hit_at_k
                .values()
                .map(|v| format!("{:>7.2}", 100.0 * v))
                .collect();
            let _ = writeln!(out, "hit         {}", head.join(""));
            let _ = writeln!(out, "            {}", vals.join(""));
        }
        for (k, s) in &self.best_of_beams {
            let _ = writeln!(
                out,
                "top-{k} beams  EM {:.2}  VQA {:.2}",
                100.0 * s.exact_match,
                100.0 * s.vqa_score
            );
        }
        for (t, s) in &self.per_type {
            let _ = writeln!(
                out,
                "{t:<12}  n={:<5} EM {:.2}  VQA {:.2}",
                s.n,
                100.0 * s.exact_match,
                100.0 * s.vqa_score
            );
        }
        out
    }
}

fn mean(total: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Retrieval results together with the passages they point into.
pub struct RetrievalInput<'a> {
    pub records: &'a [RetrievalRecord],
    pub corpus: &'a Corpus,
}

/// Scores predictions against annotated questions. Questions without a
/// prediction count as wrong; unannotated questions are skipped. Records are
/// processed in `question_id` order, so input order does not matter.
pub fn evaluate(
    predictions: &[Prediction],
    qa: &[QaExample],
    retrieval: Option<RetrievalInput<'_>>,
    cfg: &MetricsConfig,
) -> Result<EvalReport> {
    let mut questions: BTreeMap<&str, &QaExample> = BTreeMap::new();
    for q in qa {
        if questions.insert(&q.question_id, q).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate question_id {}",
                q.question_id
            )));
        }
    }
    let skipped = qa.iter().filter(|q| !q.is_annotated()).count();
    if skipped > 0 {
        log::warn!("{skipped} unannotated questions are not scored");
    }
    questions.retain(|_, q| q.is_annotated());
    let all_ids: BTreeSet<&str> = qa.iter().map(|q| q.question_id.as_str()).collect();

    let mut by_question: HashMap<&str, &Prediction> = HashMap::new();
    let mut unknown = BTreeSet::new();
    for p in predictions {
        if !all_ids.contains(p.question_id.as_str()) {
            unknown.insert(p.question_id.clone());
        } else if by_question.insert(&p.question_id, p).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate prediction for {}",
                p.question_id
            )));
        }
    }
    if let Some(r) = &retrieval {
        unknown.extend(
            r.records
                .iter()
                .filter(|rec| !all_ids.contains(rec.question_id.as_str()))
                .map(|rec| rec.question_id.clone()),
        );
    }
    if !unknown.is_empty() {
        return Err(Error::Unjoinable(unknown.into_iter().collect()));
    }
    if predictions.is_empty() && !questions.is_empty() {
        log::warn!("no predictions; every question is scored as wrong");
    }

    let variant = cfg.vqa_variant;
    let mut em_total = 0.0;
    let mut vqa_total = 0.0;
    let mut missing = 0;
    let mut per_type: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    let mut beams: BTreeMap<usize, (f64, f64)> =
        cfg.beam_ks.iter().map(|&k| (k, (0.0, 0.0))).collect();
    for (id, q) in &questions {
        let (em, vqa) = match by_question.get(id) {
            Some(p) => {
                for (&k, acc) in beams.iter_mut() {
                    let (e, v) = best_of_beams(&p.beam_answers, &q.annotated_answers, k, variant);
                    acc.0 += e;
                    acc.1 += v;
                }
                (
                    exact_match(&p.answer, &q.annotated_answers),
                    vqa_with(variant, &p.answer, &q.annotated_answers),
                )
            }
            None => {
                missing += 1;
                (0.0, 0.0)
            }
        };
        em_total += em;
        vqa_total += vqa;
        let t = per_type
            .entry(q.question_type.clone().unwrap_or_else(|| "untyped".into()))
            .or_insert((0, 0.0, 0.0));
        t.0 += 1;
        t.1 += em;
        t.2 += vqa;
    }
    if missing > 0 {
        log::warn!("{missing} questions have no prediction");
    }
    let n = questions.len();

    let mut hit = BTreeMap::new();
    if let Some(r) = retrieval {
        let by_q: HashMap<&str, &RetrievalRecord> = r
            .records
            .iter()
            .map(|rec| (rec.question_id.as_str(), rec))
            .collect();
        let mut items = Vec::with_capacity(n);
        for (id, q) in &questions {
            let passages = match by_q.get(id) {
                Some(rec) => rec
                    .passages
                    .iter()
                    .map(|h| r.corpus.lookup(&h.passage_id))
                    .collect::<Result<Vec<_>>>()?,
                None => Vec::new(),
            };
            items.push(RetrievalItem {
                question_id: id,
                answers: &q.annotated_answers,
                passages,
            });
        }
        let depth = items.iter().map(|i| i.passages.len()).min().unwrap_or(0);
        let ranks: Vec<Option<usize>> = items.iter().map(first_hit).collect();
        for &k in &cfg.hit_ks {
            if k > depth {
                log::warn!("hit@{k} skipped: some questions have only {depth} retrieved passages");
                continue;
            }
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            hit.insert(k, mean(hits as f64, n));
        }
    }

    Ok(EvalReport {
        n_questions: n,
        exact_match: mean(em_total, n),
        vqa_score: mean(vqa_total, n),
        vqa_variant: variant,
        missing_predictions: missing,
        hit_at_k: hit,
        best_of_beams: beams
            .into_iter()
            .map(|(k, (e, v))| {
                (
                    k,
                    Scores {
                        n,
                        exact_match: mean(e, n),
                        vqa_score: mean(v, n),
                    },
                )
            })
            .collect(),
        per_type: per_type
            .into_iter()
            .map(|(t, (c, e, v))| {
                (
                    t,
                    Scores {
                        n: c,
                        exact_match: mean(e, c),
                        vqa_score: mean(v, c),
                    },
                )
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VisualContext;

    fn answers(spec: &[(&str, usize)]) -> Vec<String> {
        spec.iter()
            .flat_map(|(a, n)| std::iter::repeat_n(a.to_string(), *n))
            .collect()
    }

    #[test]
    fn wetsuit_example() {
        let ann = answers(&[("wetsuit", 6), ("wet suit", 2), ("diving suit", 2)]);
        assert_eq!(vqa_score("wetsuit", &ann), 1.0);
        let two = vqa_score("Wet Suit", &ann);
        assert!((two - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(format!("{:.2}", (two * 100.0).floor() / 100.0), "0.66");
        assert_eq!(exact_match("Wet Suit", &ann), 1.0);
        assert_eq!(exact_match("drysuit", &ann), 0.0);
        assert_eq!(vqa_score("drysuit", &ann), 0.0);
    }

    #[test]
    fn averaged_variant_differs_at_two() {
        let ann = answers(&[("wet suit", 2), ("other", 8)]);
        assert!((vqa_score_averaged("wet suit", &ann) - 0.6).abs() < 1e-12);
        let three = answers(&[("x", 3), ("y", 7)]);
        assert!((vqa_score_averaged("x", &three) - 0.9).abs() < 1e-12);
        let four = answers(&[("x", 4), ("y", 6)]);
        assert_eq!(vqa_score_averaged("x", &four), 1.0);
    }

    #[test]
    fn beams_fixture() {
        let ann = answers(&[("cat", 10)]);
        let beams = vec!["dog".to_string(), "cat".to_string()];
        assert_eq!(
            best_of_beams(&beams, &ann, 1, VqaVariant::Simple),
            (0.0, 0.0)
        );
        assert_eq!(
            best_of_beams(&beams, &ann, 2, VqaVariant::Simple),
            (1.0, 1.0)
        );
        assert_eq!(
            best_of_beams(&beams, &ann, 9, VqaVariant::Simple),
            (1.0, 1.0)
        );
    }

    fn passage(id: &str, body: &str) -> Passage {
        Passage::new(id, id.to_uppercase(), body)
    }

    #[test]
    fn hit_fixture() {
        let ps = [
            passage("p1", "The giraffe has a long neck."),
            passage("p2", "Zebras are striped"),
            passage("p3", "nothing here"),
        ];
        let a1 = vec!["long neck".to_string()];
        let a2 = vec!["stripes".to_string(), "Striped!".to_string()];
        let a3 = vec!["pink".to_string()];
        let a4 = vec!["the".to_string()];
        let items = vec![
            RetrievalItem {
                question_id: "q1",
                answers: &a1,
                passages: vec![&ps[0], &ps[1]],
            },
            RetrievalItem {
                question_id: "q2",
                answers: &a2,
                passages: vec![&ps[2], &ps[1]],
            },
            RetrievalItem {
                question_id: "q3",
                answers: &a3,
                passages: vec![&ps[0], &ps[1]],
            },
            RetrievalItem {
                question_id: "q4",
                answers: &a4,
                passages: vec![&ps[0], &ps[2]],
            },
        ];
        assert_eq!(hit_at_k(&items, 1).unwrap(), 0.25);
        assert_eq!(hit_at_k(&items, 2).unwrap(), 0.5);
        let err = hit_at_k(&items, 3).unwrap_err().to_string();
        assert!(err.contains("q1"), "{err}");
    }

    fn qa(id: &str, ty: Option<&str>, ann: Vec<String>) -> QaExample {
        QaExample {
            question_id: id.into(),
            image_id: "img".into(),
            question: "what?".into(),
            visual: VisualContext::default(),
            annotated_answers: ann,
            question_type: ty.map(String::from),
            passages: None,
        }
    }

    fn pred(id: &str, answer: &str, beams: &[&str]) -> Prediction {
        Prediction {
            question_id: id.into(),
            answer: answer.into(),
            normalized_answer: normalize_answer(answer),
            token_logprobs: vec![],
            beam_answers: beams.iter().map(|s| s.to_string()).collect(),
            attribution: vec![],
        }
    }

    fn fixture() -> (Vec<QaExample>, Vec<Prediction>) {
        let qa = vec![
            qa(
                "q1",
                Some("animals"),
                answers(&[("wetsuit", 6), ("wet suit", 2), ("suit", 2)]),
            ),
            qa("q2", Some("animals"), answers(&[("red", 10)])),
            qa("q3", Some("sports"), answers(&[("ball", 1), ("bat", 9)])),
        ];
        let preds = vec![
            pred("q1", "wet suit", &["wet suit", "wetsuit"]),
            pred("q2", "blue", &["blue", "green"]),
            pred("q3", "Ball.", &["Ball.", "bat"]),
        ];
        (qa, preds)
    }

    #[test]
    fn report_fixture() {
        let (qa, preds) = fixture();
        let r = evaluate(&preds, &qa, None, &MetricsConfig::default()).unwrap();
        assert_eq!(r.n_questions, 3);
        assert!((r.exact_match - 2.0 / 3.0).abs() < 1e-12);
        let vqa = (2.0 / 3.0 + 0.0 + 1.0 / 3.0) / 3.0;
        assert!((r.vqa_score - vqa).abs() < 1e-12);
        assert_eq!(r.best_of_beams[&1].exact_match, r.exact_match);
        assert!((r.best_of_beams[&2].vqa_score - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.best_of_beams[&3], r.best_of_beams[&2]);
        assert_eq!(r.per_type["animals"].n, 2);
        assert_eq!(r.per_type["animals"].exact_match, 0.5);
        assert_eq!(r.per_type["sports"].vqa_score, 1.0 / 3.0);
        let weighted: f64 = r
            .per_type
            .values()
            .map(|s| s.exact_match * s.n as f64)
            .sum::<f64>()
            / 3.0;
        assert!((weighted - r.exact_match).abs() < 1e-9);
        assert!(r.hit_at_k.is_empty());
    }

    #[test]
    fn missing_and_unjoinable() {
        let (qa, preds) = fixture();
        let r = evaluate(&preds[..1], &qa, None, &MetricsConfig::default()).unwrap();
        assert_eq!(r.missing_predictions, 2);
        assert_eq!(r.exact_match, 1.0 / 3.0);
        let r = evaluate(&[], &qa, None, &MetricsConfig::default()).unwrap();
        assert_eq!(r.exact_match, 0.0);
        let stray = vec![pred("q9", "x", &[]), pred("q7", "y", &[])];
        match evaluate(&stray, &qa, None, &MetricsConfig::default()) {
            Err(Error::Unjoinable(ids)) => assert_eq!(ids, ["q7", "q9"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn perfect_predictions() {
        let (qa, _) = fixture();
        let mode = |a: &[String]| {
            a.iter()
                .max_by_key(|x| a.iter().filter(|y| y == x).count())
                .unwrap()
                .clone()
        };
        let preds: Vec<_> = qa
            .iter()
            .map(|q| pred(&q.question_id, &mode(&q.annotated_answers), &[]))
            .collect();
        let r = evaluate(&preds, &qa, None, &MetricsConfig::default()).unwrap();
        assert_eq!((r.exact_match, r.vqa_score), (1.0, 1.0));
    }

    #[test]
    fn report_with_retrieval() {
        let (qa, preds) = fixture();
        let corpus = Corpus::from_passages(vec![
            passage("a", "a wetsuit keeps divers warm"),
            passage("b", "apples are red"),
            passage("c", "cricket uses a bat"),
        ])
        .unwrap();
        let rec = |q: &str, ids: &[&str]| RetrievalRecord {
            question_id: q.into(),
            passages: ids
                .iter()
                .map(|i| crate::index::Hit {
                    passage_id: i.to_string(),
                    score: 0.0,
                })
                .collect(),
        };
        let records = vec![
            rec("q1", &["a", "b"]),
            rec("q2", &["a", "b"]),
            rec("q3", &["a", "b"]),
        ];
        let cfg = MetricsConfig {
            hit_ks: vec![1, 2, 5],
            ..MetricsConfig::default()
        };
        let r = evaluate(
            &preds,
            &qa,
            Some(RetrievalInput {
                records: &records,
                corpus: &corpus,
            }),
            &cfg,
        )
        .unwrap();
        assert_eq!(r.hit_at_k.len(), 2);
        assert!((r.hit_at_k[&1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.hit_at_k[&2] - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.summary().contains("@2"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn word() -> impl Strategy<Value = String> {
            prop_oneof![
                Just("cat"),
                Just("dog"),
                Just("The Cat"),
                Just("bird"),
                Just("dog!")
            ]
            .prop_map(String::from)
        }

        proptest! {
            #[test]
            fn vqa_bounds(pred in word(), ann in prop::collection::vec(word(), 10)) {
                let v = vqa_score(&pred, &ann);
                let em = exact_match(&pred, &ann);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert_eq!(v == 1.0, match_count(&pred, &ann) >= 3);
                if em == 1.0 { prop_assert!(v >= 1.0 / 3.0); }
                let a = vqa_score_averaged(&pred, &ann);
                prop_assert!((0.0..=1.0).contains(&a) && a <= v + 1e-12);
            }

            #[test]
            fn beams_monotone(beams in prop::collection::vec(word(), 1..5), ann in prop::collection::vec(word(), 10)) {
                let mut last = (0.0, 0.0);
                for k in 1..=beams.len() {
                    let cur = best_of_beams(&beams, &ann, k, VqaVariant::Simple);
                    prop_assert!(cur.0 >= last.0 && cur.1 >= last.1);
                    last = cur;
                }
                prop_assert_eq!(best_of_beams(&beams, &ann, 1, VqaVariant::Simple), (exact_match(&beams[0], &ann), vqa_score(&beams[0], &ann)));
            }

            #[test]
            fn evaluate_ignores_order(seed in 0u64..1000) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let (mut qa, mut preds) = fixture();
                let base = evaluate(&preds, &qa, None, &MetricsConfig::default()).unwrap();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                qa.shuffle(&mut rng);
                preds.shuffle(&mut rng);
                prop_assert_eq!(evaluate(&preds, &qa, None, &MetricsConfig::default()).unwrap(), base);
            }
        }
    }
}
