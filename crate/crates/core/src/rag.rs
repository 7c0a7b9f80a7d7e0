//! Marginalizing the generator over retrieved documents.
//!
//! Sequence mode mixes whole-sequence likelihoods,
//! `log p(y|x) = logsumexp_z [log p(z|x) + Σ_i log p(y_i|x,z,y_<i)]`;
//! token mode mixes at every position,
//! `log p(y|x) = Σ_i logsumexp_z [log p(z|x) + log p(y_i|x,z,y_<i)]`.
//! The plain-value functions and the tape functions compute the same
//! quantities; the tape versions carry gradients into the generator and,
//! through the priors, into the query encoder.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::generator::{condition_input, sum_in_order, Generator};
use crate::retriever::{logsumexp, RetrievedSet};
use crate::vocab::{TokenId, Vocabulary, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RagMode {
    #[default]
    Sequence,
    Token,
}

impl std::str::FromStr for RagMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(RagMode::Sequence),
            "token" => Ok(RagMode::Token),
            _ => Err(Error::Config(format!("unknown mode '{s}' (expected sequence|token)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalLikelihood {
    pub log_prob: f64,
    /// `log p(y | x, z)` for each retrieved document, in retrieval order.
    pub per_doc: Vec<f64>,
    pub mode: RagMode,
}

/// `logsumexp_z [log_priors[z] + per_doc[z]]`.
pub fn mix_sequence(log_priors: &[f64], per_doc: &[f64]) -> f64 {
    let terms: Vec<f64> = log_priors.iter().zip(per_doc).map(|(p, s)| p + s).collect();
    logsumexp(&terms)
}

/// One token-mode step: `logsumexp_z [log_priors[z] + step[z]]`.
pub fn mix_step(log_priors: &[f64], step: impl Fn(usize) -> f64) -> f64 {
    let terms: Vec<f64> = log_priors.iter().enumerate().map(|(z, p)| p + step(z)).collect();
    logsumexp(&terms)
}

/// `Σ_i mix_step(i)` with `per_doc_tokens[z][i] = log p(y_i | x, z, y_<i)`.
pub fn mix_token(log_priors: &[f64], per_doc_tokens: &[Vec<f64>]) -> f64 {
    let len = per_doc_tokens.first().map_or(0, Vec::len);
    let steps: Vec<f64> = (0..len)
        .map(|i| mix_step(log_priors, |z| per_doc_tokens[z][i]))
        .collect();
    sum_in_order(&steps)
}

/// Row `i` is the posterior over documents after observing `y_i`:
/// proportional to `prior(z) · p(y_i | x, z, y_<i)`.
pub fn posterior_rows(log_priors: &[f64], per_doc_tokens: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let len = per_doc_tokens.first().map_or(0, Vec::len);
    (0..len)
        .map(|i| {
            let joint: Vec<f64> = log_priors.iter().zip(per_doc_tokens).map(|(p, lp)| p + lp[i]).collect();
            let norm = logsumexp(&joint);
            joint.iter().map(|j| (j - norm).exp()).collect()
        })
        .collect()
}

/// Generator source for each retrieved document.
pub fn doc_sources(gen: &Generator, x: &[TokenId], set: &RetrievedSet) -> Result<Vec<Vec<TokenId>>> {
    set.docs()
        .iter()
        .map(|d| condition_input(x, &d.title_ids, &d.text_ids, gen.cfg.max_source_len))
        .collect()
}

/// Teacher-forced token log-probabilities, `[z][i]`.
pub fn per_doc_token_logprobs(
    gen: &Generator,
    x: &[TokenId],
    y: &[TokenId],
    set: &RetrievedSet,
) -> Result<Vec<Vec<f64>>> {
    doc_sources(gen, x, set)?
        .iter()
        .map(|src| gen.token_logprobs(src, y))
        .collect()
}

fn check_target(y: &[TokenId]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::EmptyInput("target sequence"));
    }
    Ok(())
}

pub fn rag_loglik(
    gen: &Generator,
    x: &[TokenId],
    y: &[TokenId],
    set: &RetrievedSet,
    mode: RagMode,
) -> Result<MarginalLikelihood> {
    check_target(y)?;
    let tokens = per_doc_token_logprobs(gen, x, y, set)?;
    let per_doc: Vec<f64> = tokens.iter().map(|lp| sum_in_order(lp)).collect();
    let log_prob = match mode {
        RagMode::Sequence => mix_sequence(set.log_priors(), &per_doc),
        RagMode::Token => mix_token(set.log_priors(), &tokens),
    };
    Ok(MarginalLikelihood {
        log_prob,
        per_doc,
        mode,
    })
}

pub fn rag_sequence_loglik(
    gen: &Generator,
    x: &[TokenId],
    y: &[TokenId],
    set: &RetrievedSet,
) -> Result<MarginalLikelihood> {
    rag_loglik(gen, x, y, set, RagMode::Sequence)
}

pub fn rag_token_loglik(
    gen: &Generator,
    x: &[TokenId],
    y: &[TokenId],
    set: &RetrievedSet,
) -> Result<MarginalLikelihood> {
    rag_loglik(gen, x, y, set, RagMode::Token)
}

/// `-log p(y|x)` on `t`, given the `1 x k` log-prior row.
pub fn rag_nll_on(
    t: &mut Tape,
    gen: &Generator,
    x: &[TokenId],
    y: &[TokenId],
    set: &RetrievedSet,
    log_priors: Var,
    mode: RagMode,
) -> Result<Var> {
    check_target(y)?;
    let sources = doc_sources(gen, x, set)?;
    let mut cols = Vec::with_capacity(sources.len());
    for src in &sources {
        let lp = gen.token_logprobs_on(t, src, y)?;
        cols.push(match mode {
            RagMode::Sequence => t.sum(lp),
            RagMode::Token => lp,
        });
    }
    let joint = if cols.len() == 1 { cols[0] } else { t.concat_cols(&cols) };
    let joint = t.add(joint, log_priors);
    let mixed = t.logsumexp_rows(joint);
    let total = match mode {
        RagMode::Sequence => mixed,
        RagMode::Token => t.sum(mixed),
    };
    Ok(t.scale(total, -1.0))
}

/// Which parts of the model a loss evaluation differentiates through.
#[derive(Clone, Copy)]
pub struct LossSpec<'a> {
    pub gen: Generator<'a>,
    pub enc: &'a EncoderConfig,
    pub mode: RagMode,
    /// Recompute priors from the query encoder on the tape. When false, the
    /// priors enter as constants.
    pub retriever_grad: bool,
}

/// Summed negative marginal log-likelihood of a batch of
/// `(x, y, retrieved set)` triples.
pub fn nll_loss_on(
    t: &mut Tape,
    spec: &LossSpec,
    params: &ParamStore,
    batch: &[(&[TokenId], &[TokenId], &RetrievedSet)],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let gen = Generator::new(spec.gen.cfg, params);
    let mut losses = Vec::with_capacity(batch.len());
    for &(x, y, set) in batch {
        let lp = if spec.retriever_grad {
            set.log_priors_on(t, spec.enc, params, x)?
        } else {
            set.log_priors_const(t)
        };
        losses.push(rag_nll_on(t, &gen, x, y, set, lp, spec.mode)?);
    }
    let stacked = if losses.len() == 1 {
        losses[0]
    } else {
        t.concat_rows(&losses)
    };
    Ok(t.sum(stacked))
}

/// Class probabilities renormalized over the label set, from log marginals.
pub fn renormalize(log_marginals: &[f64]) -> Vec<f64> {
    let norm = logsumexp(log_marginals);
    log_marginals.iter().map(|l| (l - norm).exp()).collect()
}

/// Resolves single-token class labels to vocabulary ids.
pub fn class_tokens(vocab: &Vocabulary, labels: &[&str]) -> Result<Vec<TokenId>> {
    labels
        .iter()
        .map(|l| match vocab.encode(l).as_slice() {
            [id] if *id != UNK => Ok(*id),
            _ => Err(Error::UnknownClass((*l).to_string())),
        })
        .collect()
}

/// Class probabilities for single-token labels. Each class is scored as the
/// length-one target `[class]`, which makes both marginals coincide.
pub fn classify(
    gen: &Generator,
    x: &[TokenId],
    classes: &[TokenId],
    set: &RetrievedSet,
    mode: RagMode,
) -> Result<Vec<f64>> {
    if classes.is_empty() {
        return Err(Error::EmptyInput("class set"));
    }
    if let Some(c) = classes.iter().find(|&&c| c as usize >= gen.cfg.vocab_size) {
        return Err(Error::UnknownClass(c.to_string()));
    }
    let first: Vec<Vec<f64>> = doc_sources(gen, x, set)?
        .iter()
        .map(|src| gen.next_token_logprobs(src, &[crate::vocab::BOS]))
        .collect::<Result<_>>()?;
    let log_marginals: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let per_doc: Vec<Vec<f64>> = first.iter().map(|lp| vec![lp[c as usize]]).collect();
            match mode {
                RagMode::Sequence => {
                    let seq: Vec<f64> = per_doc.iter().map(|v| sum_in_order(v)).collect();
                    mix_sequence(set.log_priors(), &seq)
                }
                RagMode::Token => mix_token(set.log_priors(), &per_doc),
            }
        })
        .collect();
    Ok(renormalize(&log_marginals))
}

/// `|y| x k` matrix of per-token document posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDocPosterior {
    pub tokens: Vec<TokenId>,
    pub passage_ids: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl TokenDocPosterior {
    /// Tab-separated table: header of passage ids, one row per token.
    pub fn to_tsv(&self, vocab: Option<&Vocabulary>) -> String {
        let mut out = String::from("token");
        for id in &self.passage_ids {
            let _ = write!(out, "\tp{id}");
        }
        out.push('\n');
        for (tok, row) in self.tokens.iter().zip(&self.rows) {
            match vocab.and_then(|v| v.token(*tok)) {
                Some(s) => out.push_str(s),
                None => out.push_str(&tok.to_string()),
            }
            for p in row {
                let _ = write!(out, "\t{p:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: &Path, vocab: Option<&Vocabulary>) -> Result<()> {
        fs::write(path, self.to_tsv(vocab)).map_err(|e| Error::io(path, e))
    }
}

pub fn token_doc_posterior(
    gen: &Generator,
    x: &[TokenId],
    y: &[TokenId],
    set: &RetrievedSet,
) -> Result<TokenDocPosterior> {
    check_target(y)?;
    let tokens = per_doc_token_logprobs(gen, x, y, set)?;
    Ok(TokenDocPosterior {
        tokens: y.to_vec(),
        passage_ids: set.passage_ids(),
        rows: posterior_rows(set.log_priors(), &tokens),
    })
}
