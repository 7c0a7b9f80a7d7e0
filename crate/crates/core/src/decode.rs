//! Decoding: greedy, beam search over the token-mode mixture transition,
//! sequence-mode Thorough and Fast decoding, and an exhaustive argmax used
//! as a test oracle.
//!
//! Ordering everywhere: higher (length-normalized) score, then shorter
//! sequence, then lexicographically smaller token ids.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::write_jsonl;
use crate::error::{Error, Result};
use crate::generator::{sum_in_order, Generator};
use crate::rag::{doc_sources, mix_sequence, mix_step, mix_token, RagMode};
use crate::retriever::{logsumexp, RetrievedSet};
use crate::vocab::{TokenId, BOS, EOS};

/// Largest search space the exhaustive oracle will enumerate.
pub const EXHAUSTIVE_BUDGET: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Final ranking uses `score / len^length_penalty`.
    pub length_penalty: f64,
    pub trace: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 4,
            max_len: 16,
            length_penalty: 0.0,
            trace: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_len == 0 {
            return Err(Error::Config("beam width and max length must be at least 1".into()));
        }
        if self.length_penalty.is_nan() || self.length_penalty < 0.0 {
            return Err(Error::Config("length penalty must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeStrategy {
    #[default]
    Greedy,
    TokenBeam,
    Thorough,
    Fast,
}

impl std::str::FromStr for DecodeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeStrategy::Greedy),
            "token-beam" => Ok(DecodeStrategy::TokenBeam),
            "thorough" => Ok(DecodeStrategy::Thorough),
            "fast" => Ok(DecodeStrategy::Fast),
            _ => Err(Error::Config(format!(
                "unknown decode strategy '{s}' (expected greedy|token-beam|thorough|fast)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Generated tokens, ending with EOS when `complete`.
    pub tokens: Vec<TokenId>,
    /// `log p(y | x, z)` keyed by passage id, for the documents that scored
    /// this hypothesis (sequence mode only).
    pub per_doc: BTreeMap<usize, f64>,
    /// Marginal log-probability under the decoding mode.
    pub score: f64,
    pub complete: bool,
}

impl Hypothesis {
    pub fn ranking_score(&self, length_penalty: f64) -> f64 {
        normalized(self.score, self.tokens.len(), length_penalty)
    }
}

fn normalized(score: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        score
    } else {
        score / (len.max(1) as f64).powf(alpha)
    }
}

/// `Less` means `a` ranks ahead of `b`.
fn rank(a_key: f64, a: &[TokenId], b_key: f64, b: &[TokenId]) -> Ordering {
    b_key
        .total_cmp(&a_key)
        .then(a.len().cmp(&b.len()))
        .then_with(|| a.cmp(b))
}

fn sort_hypotheses(hyps: &mut [Hypothesis], alpha: f64) {
    hyps.sort_by(|a, b| rank(a.ranking_score(alpha), &a.tokens, b.ranking_score(alpha), &b.tokens));
}

/// Forward-pass accounting for one decode call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DecodeStats {
    pub beam_searches: usize,
    /// Decoder evaluations made while searching.
    pub step_passes: usize,
    /// Teacher-forced passes scoring a hypothesis under a document whose
    /// beam did not contain it.
    pub rescore_passes: usize,
}

/// Candidates kept at one beam step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    /// Passage id whose beam this is; absent for token-mode search.
    pub passage_id: Option<usize>,
    pub step: usize,
    pub kept: Vec<(Vec<TokenId>, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Decoded {
    /// Best first.
    pub hypotheses: Vec<Hypothesis>,
    pub stats: DecodeStats,
    pub trace: Vec<TraceStep>,
}

impl Decoded {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.trace)
    }
}

struct BeamOutput {
    finished: Vec<(Vec<TokenId>, f64, bool)>,
    steps: usize,
    trace: Vec<TraceStep>,
}

/// Beam search over an arbitrary next-token log-probability function.
/// At each step the best `beam` extensions of all live prefixes are kept;
/// those ending in EOS leave the beam as finished hypotheses. Returns the
/// best `beam` finished hypotheses, or the best unfinished ones if nothing
/// reached EOS within `max_len`.
fn beam_search<F>(mut step: F, cfg: &BeamConfig, trace_id: Option<usize>) -> Result<BeamOutput>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    let mut live: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<TokenId>, f64, bool)> = Vec::new();
    let mut trace = Vec::new();
    let mut steps = 0;
    for t in 0..cfg.max_len {
        let mut cands: Vec<(Vec<TokenId>, f64)> = Vec::new();
        for (prefix, score) in &live {
            let mut dec_in = Vec::with_capacity(prefix.len() + 1);
            dec_in.push(BOS);
            dec_in.extend_from_slice(prefix);
            let lp = step(&dec_in)?;
            steps += 1;
            for (v, l) in lp.iter().enumerate() {
                let mut toks = prefix.clone();
                toks.push(v as TokenId);
                cands.push((toks, score + l));
            }
        }
        cands.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
        cands.truncate(cfg.beam);
        if cfg.trace {
            trace.push(TraceStep {
                passage_id: trace_id,
                step: t,
                kept: cands.clone(),
            });
        }
        let last = t + 1 == cfg.max_len;
        live.clear();
        for (toks, score) in cands {
            if toks.last() == Some(&EOS) {
                finished.push((toks, score, true));
            } else if last {
                if finished.is_empty() {
                    live.push((toks, score));
                }
            } else {
                live.push((toks, score));
            }
        }
        if live.is_empty() {
            break;
        }
    }
    if finished.is_empty() {
        finished = live.into_iter().map(|(t, s)| (t, s, false)).collect();
    }
    let alpha = cfg.length_penalty;
    finished.sort_by(|a, b| {
        rank(
            normalized(a.1, a.0.len(), alpha),
            &a.0,
            normalized(b.1, b.0.len(), alpha),
            &b.0,
        )
    });
    finished.truncate(cfg.beam);
    Ok(BeamOutput { finished, steps, trace })
}

fn clamp_len(gen: &Generator, cfg: &BeamConfig) -> Result<BeamConfig> {
    cfg.validate()?;
    let mut c = cfg.clone();
    c.max_len = c.max_len.min(gen.cfg.max_target_len);
    Ok(c)
}

fn memories(gen: &Generator, x: &[TokenId], set: &RetrievedSet) -> Result<Vec<Tensor>> {
    doc_sources(gen, x, set)?.iter().map(|s| gen.memory(s)).collect()
}

/// Mixture transition `log Σ_z p(z|x) p(v | x, z, prefix)` for every `v`.
fn mixed_step(gen: &Generator, mems: &[Tensor], log_priors: &[f64], prefix: &[TokenId]) -> Result<Vec<f64>> {
    let per_doc: Vec<Vec<f64>> = mems
        .iter()
        .map(|m| gen.next_token_logprobs_with_memory(m, prefix))
        .collect::<Result<_>>()?;
    Ok((0..gen.cfg.vocab_size)
        .map(|v| mix_step(log_priors, |z| per_doc[z][v]))
        .collect())
}

/// Beam search over the token-mode mixture transition.
pub fn rag_token_beam(gen: &Generator, x: &[TokenId], set: &RetrievedSet, cfg: &BeamConfig) -> Result<Decoded> {
    let cfg = clamp_len(gen, cfg)?;
    let mems = memories(gen, x, set)?;
    let out = beam_search(|p| mixed_step(gen, &mems, set.log_priors(), p), &cfg, None)?;
    Ok(Decoded {
        hypotheses: out
            .finished
            .into_iter()
            .map(|(tokens, score, complete)| Hypothesis {
                tokens,
                per_doc: BTreeMap::new(),
                score,
                complete,
            })
            .collect(),
        stats: DecodeStats {
            beam_searches: 1,
            step_passes: out.steps * mems.len(),
            rescore_passes: 0,
        },
        trace: out.trace,
    })
}

/// Plain beam search over one conditioned source.
pub fn standard_beam(gen: &Generator, src: &[TokenId], cfg: &BeamConfig) -> Result<Decoded> {
    let cfg = clamp_len(gen, cfg)?;
    let mem = gen.memory(src)?;
    let out = beam_search(|p| gen.next_token_logprobs_with_memory(&mem, p), &cfg, None)?;
    Ok(Decoded {
        hypotheses: out
            .finished
            .into_iter()
            .map(|(tokens, score, complete)| Hypothesis {
                tokens,
                per_doc: BTreeMap::new(),
                score,
                complete,
            })
            .collect(),
        stats: DecodeStats {
            beam_searches: 1,
            step_passes: out.steps,
            rescore_passes: 0,
        },
        trace: out.trace,
    })
}

/// Per-document beams merged into one candidate set. With `thorough`, every
/// candidate missing from some document's beam is rescored under that
/// document; otherwise such pairs contribute nothing to the mixture.
fn rag_sequence_decode(
    gen: &Generator,
    x: &[TokenId],
    set: &RetrievedSet,
    cfg: &BeamConfig,
    thorough: bool,
) -> Result<Decoded> {
    let cfg = clamp_len(gen, cfg)?;
    let mems = memories(gen, x, set)?;
    let ids = set.passage_ids();
    let beams: Vec<BeamOutput> = mems
        .par_iter()
        .zip(&ids)
        .map(|(m, &pid)| beam_search(|p| gen.next_token_logprobs_with_memory(m, p), &cfg, Some(pid)))
        .collect::<Result<_>>()?;

    let mut stats = DecodeStats {
        beam_searches: beams.len(),
        ..DecodeStats::default()
    };
    let mut trace = Vec::new();
    // Candidate tokens -> (per-doc sequence score by doc index, complete).
    let mut union: BTreeMap<Vec<TokenId>, (Vec<Option<f64>>, bool)> = BTreeMap::new();
    for (z, beam) in beams.into_iter().enumerate() {
        stats.step_passes += beam.steps;
        trace.extend(beam.trace);
        for (tokens, score, complete) in beam.finished {
            let entry = union.entry(tokens).or_insert_with(|| (vec![None; set.k()], complete));
            entry.0[z] = Some(score);
        }
    }
    // A document whose beam reached no EOS offers unfinished prefixes; they
    // compete only when no document produced a complete hypothesis.
    if union.values().any(|(_, complete)| *complete) {
        union.retain(|_, (_, complete)| *complete);
    }

    let log_priors = set.log_priors();
    let mut hypotheses = Vec::with_capacity(union.len());
    for (tokens, (scores, complete)) in union {
        let (present_lp, present_s): (Vec<f64>, Vec<f64>) = scores
            .iter()
            .enumerate()
            .filter_map(|(z, s)| s.map(|s| (log_priors[z], s)))
            .unzip();
        let fast = mix_sequence(&present_lp, &present_s);
        let mut per_doc: BTreeMap<usize, f64> = scores
            .iter()
            .enumerate()
            .filter_map(|(z, s)| s.map(|s| (ids[z], s)))
            .collect();
        let mut score = fast;
        if thorough {
            let mut terms = vec![fast];
            for (z, s) in scores.iter().enumerate() {
                if s.is_none() {
                    let lp = sum_in_order(&gen.token_logprobs_from_memory(&mems[z], &tokens)?);
                    stats.rescore_passes += 1;
                    per_doc.insert(ids[z], lp);
                    terms.push(log_priors[z] + lp);
                }
            }
            if terms.len() > 1 {
                score = logsumexp(&terms);
            }
        }
        hypotheses.push(Hypothesis {
            tokens,
            per_doc,
            score,
            complete,
        });
    }
    sort_hypotheses(&mut hypotheses, cfg.length_penalty);
    Ok(Decoded {
        hypotheses,
        stats,
        trace,
    })
}

pub fn rag_sequence_thorough(gen: &Generator, x: &[TokenId], set: &RetrievedSet, cfg: &BeamConfig) -> Result<Decoded> {
    rag_sequence_decode(gen, x, set, cfg, true)
}

pub fn rag_sequence_fast(gen: &Generator, x: &[TokenId], set: &RetrievedSet, cfg: &BeamConfig) -> Result<Decoded> {
    rag_sequence_decode(gen, x, set, cfg, false)
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (v, l) in lp.iter().enumerate() {
        if *l > lp[best] {
            best = v;
        }
    }
    best
}

/// Greedy decoding. Token mode takes the argmax of the mixture transition;
/// sequence mode decodes under the single highest-prior document.
pub fn greedy(gen: &Generator, x: &[TokenId], set: &RetrievedSet, mode: RagMode, max_len: usize) -> Result<Hypothesis> {
    let max_len = max_len.min(gen.cfg.max_target_len);
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let (mems, log_priors, top_doc) = match mode {
        RagMode::Token => (memories(gen, x, set)?, set.log_priors().to_vec(), None),
        RagMode::Sequence => {
            let src = &doc_sources(gen, x, set)?[0];
            (
                vec![gen.memory(src)?],
                vec![0.0],
                Some(set.docs()[0].passage.passage_id),
            )
        }
    };
    let mut prefix = vec![BOS];
    let mut score = 0.0;
    let mut complete = false;
    while prefix.len() <= max_len {
        let lp = mixed_step(gen, &mems, &log_priors, &prefix)?;
        let v = argmax(&lp);
        score += lp[v];
        prefix.push(v as TokenId);
        if v as TokenId == EOS {
            complete = true;
            break;
        }
    }
    let tokens = prefix[1..].to_vec();
    let mut per_doc = BTreeMap::new();
    if let Some(pid) = top_doc {
        per_doc.insert(pid, score);
        score += set.log_priors()[0];
    }
    Ok(Hypothesis {
        tokens,
        per_doc,
        score,
        complete,
    })
}

/// Number of sequences of length `1..=max_len` that end in EOS and contain
/// it nowhere else.
fn candidate_count(vocab: usize, max_len: usize) -> u128 {
    let inner = vocab.saturating_sub(1) as u128;
    (0..max_len as u32)
        .map(|l| inner.saturating_pow(l))
        .fold(0u128, u128::saturating_add)
}

/// Odometer increment; false once every combination has been visited.
fn advance(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

/// Exact argmax of the mode's marginal over all sequences of length at most
/// `max_len` ending in EOS, by teacher-forced scoring of each one.
pub fn exhaustive_argmax(
    gen: &Generator,
    x: &[TokenId],
    set: &RetrievedSet,
    mode: RagMode,
    max_len: usize,
) -> Result<Hypothesis> {
    let vocab = gen.cfg.vocab_size;
    let space = (vocab as u128).saturating_pow(max_len as u32);
    if space > EXHAUSTIVE_BUDGET {
        return Err(Error::BudgetExceeded {
            required: space,
            budget: EXHAUSTIVE_BUDGET,
        });
    }
    if max_len == 0 || max_len > gen.cfg.max_target_len {
        return Err(Error::InvalidArgument(format!(
            "max_len must be in 1..={}",
            gen.cfg.max_target_len
        )));
    }
    debug_assert!(candidate_count(vocab, max_len) <= space);
    let mems = memories(gen, x, set)?;
    let ids = set.passage_ids();
    let inner: Vec<TokenId> = (0..vocab as TokenId).filter(|&v| v != EOS).collect();
    let mut best: Option<Hypothesis> = None;
    for len in 1..=max_len {
        let mut digits = vec![0usize; len - 1];
        loop {
            let mut tokens: Vec<TokenId> = digits.iter().map(|&d| inner[d]).collect();
            tokens.push(EOS);
            let per_tok: Vec<Vec<f64>> = mems
                .iter()
                .map(|m| gen.token_logprobs_from_memory(m, &tokens))
                .collect::<Result<_>>()?;
            let (score, per_doc) = match mode {
                RagMode::Token => (mix_token(set.log_priors(), &per_tok), BTreeMap::new()),
                RagMode::Sequence => {
                    let seq: Vec<f64> = per_tok.iter().map(|t| sum_in_order(t)).collect();
                    let per_doc = ids.iter().copied().zip(seq.iter().copied()).collect();
                    (mix_sequence(set.log_priors(), &seq), per_doc)
                }
            };
            let better = match &best {
                None => true,
                Some(b) => rank(score, &tokens, b.score, &b.tokens) == Ordering::Less,
            };
            if better {
                best = Some(Hypothesis {
                    tokens,
                    per_doc,
                    score,
                    complete: true,
                });
            }
            if !advance(&mut digits, inner.len()) {
                break;
            }
        }
    }
    best.ok_or(Error::EmptyInput("candidate space"))
}

/// Runs the named strategy and returns the ranked hypotheses.
pub fn decode(
    gen: &Generator,
    x: &[TokenId],
    set: &RetrievedSet,
    strategy: DecodeStrategy,
    mode: RagMode,
    cfg: &BeamConfig,
) -> Result<Decoded> {
    match strategy {
        DecodeStrategy::Greedy => {
            let h = greedy(gen, x, set, mode, cfg.max_len)?;
            let docs = if mode == RagMode::Token { set.k() } else { 1 };
            Ok(Decoded {
                stats: DecodeStats {
                    beam_searches: 0,
                    step_passes: h.tokens.len() * docs,
                    rescore_passes: 0,
                },
                hypotheses: vec![h],
                trace: Vec::new(),
            })
        }
        DecodeStrategy::TokenBeam => rag_token_beam(gen, x, set, cfg),
        DecodeStrategy::Thorough => rag_sequence_thorough(gen, x, set, cfg),
        DecodeStrategy::Fast => rag_sequence_fast(gen, x, set, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::condition_input;
    use crate::generator::tests::tiny;
    use crate::retriever::RetrievedDoc;

    fn set(k: usize, seed: u64) -> RetrievedSet {
        let docs = (0..k)
            .map(|z| {
                RetrievedDoc::from_ids(
                    z,
                    vec![(z as u64 + seed) as TokenId % 5],
                    vec![1, (z as TokenId * 3) % 5],
                )
            })
            .collect();
        let logits = (0..k).map(|z| 1.0 - 0.7 * z as f64).collect();
        RetrievedSet::new(docs, logits, None).unwrap()
    }

    fn wide(max_len: usize) -> BeamConfig {
        BeamConfig {
            beam: 5usize.pow(max_len as u32),
            max_len,
            ..BeamConfig::default()
        }
    }

    #[test]
    fn candidate_count_matches_enumeration() {
        assert_eq!(candidate_count(5, 3), 1 + 4 + 16);
        assert_eq!(candidate_count(1, 4), 1);
    }

    #[test]
    fn exhaustive_budget_is_enforced() {
        let (cfg, params) = tiny(5, 0);
        let gen = Generator::new(&cfg, &params);
        let err = exhaustive_argmax(&gen, &[1], &set(1, 0), RagMode::Token, 9).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
    }

    #[test]
    fn wide_token_beam_finds_exhaustive_argmax() {
        for seed in 0..6 {
            let (cfg, params) = tiny(5, seed);
            let gen = Generator::new(&cfg, &params);
            let s = set(3, seed);
            let beam = rag_token_beam(&gen, &[1, 0], &s, &wide(3)).unwrap();
            let oracle = exhaustive_argmax(&gen, &[1, 0], &s, RagMode::Token, 3).unwrap();
            assert_eq!(beam.best().unwrap().tokens, oracle.tokens, "seed {seed}");
            assert_eq!(beam.best().unwrap().score, oracle.score);
        }
    }

    #[test]
    fn wide_thorough_finds_exhaustive_argmax() {
        for seed in 0..6 {
            let (cfg, params) = tiny(5, seed);
            let gen = Generator::new(&cfg, &params);
            let s = set(3, seed);
            let th = rag_sequence_thorough(&gen, &[1, 0], &s, &wide(3)).unwrap();
            let oracle = exhaustive_argmax(&gen, &[1, 0], &s, RagMode::Sequence, 3).unwrap();
            assert_eq!(th.best().unwrap().tokens, oracle.tokens, "seed {seed}");
            assert_eq!(th.best().unwrap().score, oracle.score);
        }
    }

    #[test]
    fn fast_never_exceeds_thorough_and_counts_passes() {
        for seed in 0..6 {
            let (cfg, params) = tiny(5, seed);
            let gen = Generator::new(&cfg, &params);
            let s = set(3, seed);
            let bc = BeamConfig {
                beam: 2,
                max_len: 4,
                ..BeamConfig::default()
            };
            let th = rag_sequence_thorough(&gen, &[1], &s, &bc).unwrap();
            let fa = rag_sequence_fast(&gen, &[1], &s, &bc).unwrap();
            assert_eq!(fa.stats.beam_searches, 3);
            assert_eq!(fa.stats.rescore_passes, 0);
            assert_eq!(th.hypotheses.len(), fa.hypotheses.len());
            assert!(th.hypotheses.len() <= 3 * 2);
            assert!(th.stats.rescore_passes <= 3 * th.hypotheses.len());
            let missing: usize = fa.hypotheses.iter().map(|h| 3 - h.per_doc.len()).sum();
            assert_eq!(th.stats.rescore_passes, missing);
            for h in &th.hypotheses {
                assert_eq!(h.per_doc.len(), 3);
                let f = fa.hypotheses.iter().find(|f| f.tokens == h.tokens).unwrap();
                assert!(f.score <= h.score);
            }
        }
    }

    #[test]
    fn unfinished_prefixes_yield_to_complete_hypotheses() {
        let mut mixed = 0;
        for seed in 0..40 {
            let (cfg, params) = tiny(5, seed);
            let gen = Generator::new(&cfg, &params);
            let s = set(4, seed);
            // One step with width 2: some documents end on EOS, others do not.
            let bc = BeamConfig {
                beam: 2,
                max_len: 1,
                ..BeamConfig::default()
            };
            let th = rag_sequence_thorough(&gen, &[1], &s, &bc).unwrap();
            let per_doc: Vec<bool> = memories(&gen, &[1], &s)
                .unwrap()
                .iter()
                .map(|m| {
                    let lp = gen.next_token_logprobs_with_memory(m, &[BOS]).unwrap();
                    let mut order: Vec<usize> = (0..lp.len()).collect();
                    order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]));
                    order[..2].contains(&(EOS as usize))
                })
                .collect();
            if per_doc.iter().any(|&f| f) {
                assert!(th.hypotheses.iter().all(|h| h.complete), "seed {seed}");
                mixed += usize::from(per_doc.iter().any(|&f| !f));
            } else {
                assert!(th.hypotheses.iter().all(|h| !h.complete));
            }
        }
        assert!(mixed > 0, "no seed mixed finished and unfinished beams");
    }

    #[test]
    fn single_document_matches_standard_beam() {
        let (cfg, params) = tiny(5, 11);
        let gen = Generator::new(&cfg, &params);
        let s = set(1, 2);
        let bc = BeamConfig {
            beam: 3,
            max_len: 4,
            ..BeamConfig::default()
        };
        let d = &s.docs()[0];
        let src = condition_input(&[1, 1], &d.title_ids, &d.text_ids, cfg.max_source_len).unwrap();
        let plain = standard_beam(&gen, &src, &bc).unwrap();
        let strip = |h: &Hypothesis| (h.tokens.clone(), h.score);
        let tok = rag_token_beam(&gen, &[1, 1], &s, &bc).unwrap();
        let th = rag_sequence_thorough(&gen, &[1, 1], &s, &bc).unwrap();
        let p: Vec<_> = plain.hypotheses.iter().map(strip).collect();
        assert_eq!(tok.hypotheses.iter().map(strip).collect::<Vec<_>>(), p);
        assert_eq!(th.hypotheses.iter().map(strip).collect::<Vec<_>>(), p);
    }

    #[test]
    fn greedy_equals_width_one_beam() {
        for seed in 0..5 {
            let (cfg, params) = tiny(5, seed);
            let gen = Generator::new(&cfg, &params);
            let s = set(3, seed);
            let bc = BeamConfig {
                beam: 1,
                max_len: 5,
                ..BeamConfig::default()
            };
            let g = greedy(&gen, &[1], &s, RagMode::Token, 5).unwrap();
            let b = rag_token_beam(&gen, &[1], &s, &bc).unwrap();
            assert_eq!(b.best().unwrap().tokens, g.tokens);
            assert_eq!(b.best().unwrap().score, g.score);
            assert_eq!(greedy(&gen, &[1], &s, RagMode::Token, 5).unwrap(), g);
        }
    }

    #[test]
    fn sequence_greedy_uses_top_document() {
        let (cfg, params) = tiny(5, 3);
        let gen = Generator::new(&cfg, &params);
        let s = set(3, 1);
        let g = greedy(&gen, &[1], &s, RagMode::Sequence, 4).unwrap();
        let only = s.truncate(1).unwrap();
        let g1 = greedy(&gen, &[1], &only, RagMode::Token, 4).unwrap();
        assert_eq!(g.tokens, g1.tokens);
        assert_eq!(g.per_doc.keys().copied().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn exhaustive_beats_every_beam_width() {
        let (cfg, params) = tiny(5, 21);
        let gen = Generator::new(&cfg, &params);
        let s = set(2, 5);
        let oracle = exhaustive_argmax(&gen, &[1], &s, RagMode::Token, 3).unwrap();
        for beam in 1..=6 {
            let bc = BeamConfig {
                beam,
                max_len: 3,
                ..BeamConfig::default()
            };
            let d = rag_token_beam(&gen, &[1], &s, &bc).unwrap();
            let best = d.best().unwrap();
            if best.complete {
                assert!(best.score <= oracle.score);
            }
        }
    }

    #[test]
    fn trace_records_each_step() {
        let (cfg, params) = tiny(5, 2);
        let gen = Generator::new(&cfg, &params);
        let bc = BeamConfig {
            beam: 2,
            max_len: 3,
            trace: true,
            ..BeamConfig::default()
        };
        let d = rag_sequence_fast(&gen, &[1], &set(2, 0), &bc).unwrap();
        assert!(!d.trace.is_empty());
        assert!(d.trace.iter().all(|s| s.kept.len() <= 2 && s.passage_id.is_some()));
        let dir = tempfile::tempdir().unwrap();
        d.write_trace(&dir.path().join("trace.jsonl")).unwrap();
    }
}
