//! Answer generation: greedy decoding, beam search, answer normalization and
//! ensemble selection.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::fid::{FidModel, Memory, Real, EOS};
use crate::{Error, Result};

/// Anything that yields next-token log-probabilities for a generated prefix.
pub trait StepModel {
    fn vocab_size(&self) -> usize;

    fn eos(&self) -> u32 {
        EOS
    }

    /// Longest sequence the model can produce.
    fn max_len(&self) -> usize {
        usize::MAX
    }

    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// A trained reader bound to the fused encoder state of one question.
pub struct FidStep<'a, R> {
    pub model: &'a FidModel<R>,
    pub memory: &'a Memory<R>,
}

impl<'a, R: Real> FidStep<'a, R> {
    pub fn new(model: &'a FidModel<R>, memory: &'a Memory<R>) -> Self {
        Self { model, memory }
    }

    /// Fills in the per-passage attribution of `candidate`.
    pub fn attribute(&self, mut candidate: AnswerCandidate) -> Result<AnswerCandidate> {
        candidate.attribution = self.model.attribution(self.memory, &candidate.tokens)?;
        Ok(candidate)
    }
}

impl<R: Real> StepModel for FidStep<'_, R> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn max_len(&self) -> usize {
        self.model.config().max_decode_len
    }

    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        self.model.next_log_probs(self.memory, prefix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCandidate {
    /// Generated ids, including the closing EOS when one was produced.
    pub tokens: Vec<u32>,
    pub token_logprobs: Vec<f64>,
    /// Per-passage support, empty until attributed.
    #[serde(default)]
    pub attribution: Vec<f64>,
}

impl AnswerCandidate {
    fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            token_logprobs: Vec::new(),
            attribution: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Length-normalized log-probability; `-inf` for an empty candidate.
    pub fn score(&self) -> f64 {
        if self.token_logprobs.is_empty() {
            return f64::NEG_INFINITY;
        }
        self.token_logprobs.iter().sum::<f64>() / self.token_logprobs.len() as f64
    }

    pub fn ends_with(&self, token: u32) -> bool {
        self.tokens.last() == Some(&token)
    }

    /// Answer ids with any trailing EOS removed.
    pub fn answer_tokens(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    fn extend(&self, token: u32, logprob: f64) -> Self {
        let mut next = self.clone();
        next.tokens.push(token);
        next.token_logprobs.push(logprob);
        next
    }
}

/// Higher score first, then lexicographically smaller token sequence.
pub fn rank_candidates(a: &AnswerCandidate, b: &AnswerCandidate) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageScore {
    pub passage_id: String,
    pub score: f64,
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub answer: String,
    pub normalized_answer: String,
    pub token_logprobs: Vec<f64>,
    /// Ranked beam answers; the first equals `answer` under beam decoding.
    pub beam_answers: Vec<String>,
    pub attribution: Vec<PassageScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub early_stopping: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 3,
            max_len: 20,
            early_stopping: true,
        }
    }
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Picks the most probable token at every step until EOS or `max_len`.
pub fn greedy_decode<S: StepModel + ?Sized>(model: &S, max_len: usize) -> Result<AnswerCandidate> {
    let max_len = max_len.min(model.max_len());
    let eos = model.eos();
    let mut out = AnswerCandidate::empty();
    while out.len() < max_len && !out.ends_with(eos) {
        let logp = model.log_probs(&out.tokens)?;
        let t = argmax_lowest(&logp);
        out = out.extend(t as u32, logp[t]);
    }
    Ok(out)
}

/// Beam search returning up to `beam_size` candidates ranked by mean token
/// log-probability. With early stopping, finished hypotheses keep their beam
/// slot and the search ends once every slot is finished; without it they
/// move to a side pool and the beam keeps extending open hypotheses until
/// `max_len`. The greedy sequence always takes part in the final ranking.
pub fn beam_search<S: StepModel + ?Sized>(
    model: &S,
    cfg: &BeamConfig,
) -> Result<Vec<AnswerCandidate>> {
    if cfg.beam_size == 0 {
        return Err(Error::InvalidArgument(
            "beam_size must be at least 1".into(),
        ));
    }
    let max_len = cfg.max_len.min(model.max_len());
    let eos = model.eos();
    let m = cfg.beam_size;
    let mut beam = vec![AnswerCandidate::empty()];
    let mut finished = Vec::new();

    for _ in 0..max_len {
        let mut pool = Vec::new();
        for hyp in beam {
            if hyp.ends_with(eos) {
                pool.push(hyp);
                continue;
            }
            let logp = model.log_probs(&hyp.tokens)?;
            pool.extend(
                logp.iter()
                    .enumerate()
                    .map(|(t, &lp)| hyp.extend(t as u32, lp)),
            );
        }
        pool.sort_by(rank_candidates);
        if cfg.early_stopping {
            pool.truncate(m);
            beam = pool;
            if beam.iter().all(|h| h.ends_with(eos)) {
                break;
            }
        } else {
            let (done, open): (Vec<_>, Vec<_>) = pool.into_iter().partition(|h| h.ends_with(eos));
            finished.extend(done);
            beam = open.into_iter().take(m).collect();
            if beam.is_empty() {
                break;
            }
        }
    }

    let mut ranked = finished;
    ranked.extend(beam.into_iter().filter(|h| !h.is_empty()));
    let greedy = greedy_decode(model, max_len)?;
    if !greedy.is_empty() && !ranked.iter().any(|h| h.tokens == greedy.tokens) {
        ranked.push(greedy);
    }
    ranked.sort_by(rank_candidates);
    ranked.truncate(m);
    Ok(ranked)
}

/// Lowercases, strips ASCII punctuation, drops the articles a/an/the and
/// collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let stripped: String = lower
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Index of the candidate with the highest mean token log-probability,
/// preferring the lowest index on ties. Empty candidates are skipped.
pub fn ensemble_select(candidates: &[AnswerCandidate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "ensemble_select needs at least one candidate".into(),
        ));
    }
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if c.is_empty() {
            log::warn!("ensemble candidate {i} is empty and was skipped");
            continue;
        }
        if best.is_none_or(|b| c.score() > candidates[b].score()) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("every ensemble candidate is empty".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token table keyed by prefix length.
    struct Table {
        rows: Vec<Vec<f64>>,
    }

    impl StepModel for Table {
        fn vocab_size(&self) -> usize {
            self.rows[0].len()
        }

        fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
            Ok(self.rows[prefix.len().min(self.rows.len() - 1)]
                .iter()
                .map(|p: &f64| p.ln())
                .collect())
        }
    }

    #[test]
    fn greedy_unrolls_argmax() {
        let table = Table {
            rows: vec![
                vec![0.1, 0.6, 0.3],
                vec![0.2, 0.4, 0.4],
                vec![0.1, 0.2, 0.7],
            ],
        };
        let c = greedy_decode(&table, 10).unwrap();
        assert_eq!(c.tokens, [1, 1, EOS]);
        assert_eq!(c.answer_tokens(), [1, 1]);
        let want = [0.6f64.ln(), 0.4f64.ln(), 0.7f64.ln()];
        assert_eq!(c.token_logprobs, want);
        assert_eq!(greedy_decode(&table, 2).unwrap().tokens, [1, 1]);
    }

    #[test]
    fn eos_first_gives_empty_answer() {
        let table = Table {
            rows: vec![vec![0.05, 0.05, 0.9]],
        };
        let c = greedy_decode(&table, 5).unwrap();
        assert_eq!(c.tokens, [EOS]);
        assert!(c.answer_tokens().is_empty());
        assert_eq!(greedy_decode(&table, 5).unwrap(), c);
    }

    #[test]
    fn beam_prefers_higher_mean() {
        // Greedy takes 1 then is stuck with poor continuations; 2 leads to a
        // confident finish.
        struct Branchy;
        impl StepModel for Branchy {
            fn vocab_size(&self) -> usize {
                3
            }
            fn eos(&self) -> u32 {
                0
            }
            fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
                let p: [f64; 3] = match prefix {
                    [] => [0.1, 0.5, 0.4],
                    [1] => [0.34, 0.33, 0.33],
                    [2] => [0.98, 0.01, 0.01],
                    _ => [0.9, 0.05, 0.05],
                };
                Ok(p.iter().map(|v| v.ln()).collect())
            }
        }
        let greedy = greedy_decode(&Branchy, 4).unwrap();
        assert_eq!(greedy.tokens[0], 1);
        let beams = beam_search(
            &Branchy,
            &BeamConfig {
                beam_size: 2,
                max_len: 4,
                early_stopping: true,
            },
        )
        .unwrap();
        assert_eq!(beams[0].tokens, [2, 0]);
        assert!(beams.windows(2).all(|w| w[0].score() >= w[1].score()));
        assert!(beams[0].score() >= greedy.score());
    }

    #[test]
    fn zero_beam_is_rejected() {
        let table = Table {
            rows: vec![vec![0.5, 0.5]],
        };
        assert!(beam_search(
            &table,
            &BeamConfig {
                beam_size: 0,
                ..BeamConfig::default()
            }
        )
        .is_err());
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("The Wetsuit!"), "wetsuit");
        assert_eq!(normalize_answer("a  dog"), "dog");
        assert_eq!(normalize_answer("Wet Suit"), "wet suit");
        assert_eq!(normalize_answer(" the, an. A! "), "");
        assert_eq!(normalize_answer("theater"), "theater");
    }

    fn cand(lp: &[f64]) -> AnswerCandidate {
        AnswerCandidate {
            tokens: (0..lp.len() as u32).map(|t| t + 4).collect(),
            token_logprobs: lp.to_vec(),
            attribution: Vec::new(),
        }
    }

    #[test]
    fn ensemble_picks_highest_mean() {
        assert_eq!(
            ensemble_select(&[cand(&[-0.1, -0.2]), cand(&[-0.05])]).unwrap(),
            1
        );
        assert_eq!(ensemble_select(&[cand(&[-0.3])]).unwrap(), 0);
        assert_eq!(ensemble_select(&[cand(&[-0.5]), cand(&[-0.5])]).unwrap(), 0);
        assert_eq!(ensemble_select(&[cand(&[]), cand(&[-2.0])]).unwrap(), 1);
        assert!(ensemble_select(&[]).is_err());
        assert!(ensemble_select(&[cand(&[])]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalization_is_idempotent(s in "\\PC{0,40}") {
                let once = normalize_answer(&s);
                prop_assert_eq!(normalize_answer(&once), once);
            }

            #[test]
            fn articles_and_punctuation_vanish(parts in prop::collection::vec(
                prop_oneof![Just("a"), Just("An"), Just("THE"), Just("!?"), Just(" "), Just("."), Just("\t")], 0..12)) {
                prop_assert_eq!(normalize_answer(&parts.join(" ")), "");
            }

            #[test]
            fn shift_keeps_ensemble_choice(
                rows in prop::collection::vec(prop::collection::vec(-5.0f64..0.0, 3), 1..6),
                c in -3.0f64..3.0,
            ) {
                let plain: Vec<_> = rows.iter().map(|r| cand(r)).collect();
                let shifted: Vec<_> = rows.iter().map(|r| cand(&r.iter().map(|v| v + c).collect::<Vec<_>>())).collect();
                let a = ensemble_select(&plain).unwrap();
                let b = ensemble_select(&shifted).unwrap();
                prop_assert!((plain[a].score() - plain[b].score()).abs() < 1e-9);
            }
        }
    }
}
