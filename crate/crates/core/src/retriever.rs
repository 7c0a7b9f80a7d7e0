//! Top-k retrieval producing the truncated prior over passages: dense
//! bi-encoder search (trainable through the query encoder) and a fixed BM25
//! baseline.

use std::collections::HashMap;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::corpus::{Passage, PassageStore};
use crate::encoder::{document_tokens, encode_query, Encoder, EncoderConfig, Side};
use crate::error::{Error, Result};
use crate::index::{IndexHandle, SearchMode};
use crate::vocab::{TokenId, Vocabulary, NUM_RESERVED};

/// Max-subtracted softmax over the retrieved logits.
pub fn softmax_topk(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite { op: "softmax_topk" });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Max-subtracted log-softmax over the retrieved logits.
pub fn log_softmax_topk(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite { op: "softmax_topk" });
    }
    let lse = logsumexp(logits);
    Ok(logits.iter().map(|l| l - lse).collect())
}

/// `log Σ exp(x)` with max subtraction; `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// A retrieved passage with the token ids the generator conditions on.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedDoc {
    pub passage: Passage,
    pub title_ids: Vec<TokenId>,
    pub text_ids: Vec<TokenId>,
}

impl RetrievedDoc {
    pub fn new(passage: &Passage, vocab: &Vocabulary) -> Self {
        RetrievedDoc {
            title_ids: vocab.encode(&passage.title),
            text_ids: vocab.encode(&passage.text),
            passage: passage.clone(),
        }
    }

    /// A document given directly by token ids; the passage carries only the id.
    pub fn from_ids(passage_id: usize, title_ids: Vec<TokenId>, text_ids: Vec<TokenId>) -> Self {
        RetrievedDoc {
            passage: Passage {
                passage_id,
                doc_id: format!("p{passage_id}"),
                title: String::new(),
                text: String::new(),
                position: 0,
            },
            title_ids,
            text_ids,
        }
    }
}

/// The top-k documents for one input, in descending logit order, with their
/// logits and the softmax over those logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedSet {
    docs: Vec<RetrievedDoc>,
    logits: Vec<f64>,
    priors: Vec<f64>,
    log_priors: Vec<f64>,
    /// Document embeddings (`k x d`) when the logits are inner products.
    doc_vectors: Option<Tensor>,
}

impl RetrievedSet {
    pub fn new(docs: Vec<RetrievedDoc>, logits: Vec<f64>, doc_vectors: Option<Tensor>) -> Result<Self> {
        if docs.len() != logits.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} docs but {} logits",
                docs.len(),
                logits.len()
            )));
        }
        if let Some(v) = &doc_vectors {
            if v.rows() != docs.len() {
                return Err(Error::ShapeMismatch("one document vector per retrieved doc".into()));
            }
        }
        if logits.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "retrieved logits must be in descending order".into(),
            ));
        }
        let priors = softmax_topk(&logits)?;
        let log_priors = log_softmax_topk(&logits)?;
        Ok(RetrievedSet {
            docs,
            logits,
            priors,
            log_priors,
            doc_vectors,
        })
    }

    /// A set whose logits are `ln(prior)`; the priors must be descending.
    pub fn from_priors(docs: Vec<RetrievedDoc>, priors: &[f64]) -> Result<Self> {
        Self::new(docs, priors.iter().map(|p| p.ln()).collect(), None)
    }

    pub fn k(&self) -> usize {
        self.docs.len()
    }

    pub fn docs(&self) -> &[RetrievedDoc] {
        &self.docs
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn log_priors(&self) -> &[f64] {
        &self.log_priors
    }

    pub fn doc_vectors(&self) -> Option<&Tensor> {
        self.doc_vectors.as_ref()
    }

    pub fn passage_ids(&self) -> Vec<usize> {
        self.docs.iter().map(|d| d.passage.passage_id).collect()
    }

    /// The first `k` documents with priors renormalized over them.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let k = k.min(self.k());
        let vectors = match &self.doc_vectors {
            Some(v) => Some(Tensor::matrix(k, v.cols(), v.data()[..k * v.cols()].to_vec())?),
            None => None,
        };
        Self::new(self.docs[..k].to_vec(), self.logits[..k].to_vec(), vectors)
    }

    /// Shannon entropy of the priors, in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .priors
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// Log-priors as a `1 x k` constant on `t`.
    pub fn log_priors_const(&self, t: &mut Tape) -> Var {
        t.constant(Tensor::row(self.log_priors.clone()))
    }

    /// Log-priors recomputed on `t` from the query encoder so gradients flow
    /// into it. The set of documents stays fixed.
    pub fn log_priors_on(&self, t: &mut Tape, enc: &EncoderConfig, params: &ParamStore, x: &[TokenId]) -> Result<Var> {
        let Some(vectors) = &self.doc_vectors else {
            return Ok(self.log_priors_const(t));
        };
        let q = Encoder::new(enc, params, Side::Query).encode_on(t, x)?;
        let d = t.constant(vectors.clone());
        let logits = t.matmul_t(q, d);
        Ok(t.log_softmax_rows(logits))
    }
}

fn check_k(k: usize, available: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if available == 0 {
        return Err(Error::EmptyInput("index"));
    }
    if k > available {
        log::warn!("requested k={k} but only {available} passages exist; returning all of them");
    }
    Ok(k.min(available))
}

/// Dense retrieval: encode `x`, search the index, softmax over inner products.
pub fn retrieve_dense(
    x: &[TokenId],
    k: usize,
    handle: &IndexHandle,
    enc: &EncoderConfig,
    params: &ParamStore,
    vocab: &Vocabulary,
    mode: SearchMode,
) -> Result<RetrievedSet> {
    let k = check_k(k, handle.len())?;
    let q = encode_query(enc, params, x)?;
    let hits = handle.search(&q, k, mode)?;
    let store = handle.store();
    let mut docs = Vec::with_capacity(hits.len());
    let mut vectors = Vec::with_capacity(hits.len() * handle.dim());
    for &(id, _) in &hits {
        let passage = store
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("index row {id} has no passage")))?;
        docs.push(RetrievedDoc::new(passage, vocab));
        vectors.extend(handle.index().row_f64(id));
    }
    let logits = hits.iter().map(|h| h.1).collect();
    let vectors = Tensor::matrix(hits.len(), handle.dim(), vectors)?;
    RetrievedSet::new(docs, logits, Some(vectors))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Corpus statistics and postings for Okapi BM25 over vocabulary ids.
/// Reserved ids (padding, unknown, markers) are never indexed.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    postings: HashMap<TokenId, Vec<(usize, u32)>>,
    doc_len: Vec<usize>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn build(store: &PassageStore, vocab: &Vocabulary, params: Bm25Params) -> Self {
        let docs: Vec<Vec<TokenId>> = store.iter().map(|p| document_tokens(vocab, p)).collect();
        Self::from_token_docs(&docs, params)
    }

    /// Statistics over already tokenized passages, passage `i` = `docs[i]`.
    pub fn from_token_docs(docs: &[Vec<TokenId>], params: Bm25Params) -> Self {
        let mut postings: HashMap<TokenId, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        for (pid, doc) in docs.iter().enumerate() {
            let terms: Vec<TokenId> = doc.iter().copied().filter(|&t| t as usize >= NUM_RESERVED).collect();
            doc_len.push(terms.len());
            let mut tf: HashMap<TokenId, u32> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            let mut tf: Vec<_> = tf.into_iter().collect();
            tf.sort_unstable();
            for (t, c) in tf {
                postings.entry(t).or_default().push((pid, c));
            }
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            doc_len.iter().sum::<usize>() as f64 / docs.len() as f64
        };
        Bm25Index {
            params,
            postings,
            doc_len,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    /// `max(0, ln((N - df + 0.5) / (df + 0.5)))`.
    pub fn idf(&self, term: TokenId) -> f64 {
        let n = self.len() as f64;
        let df = self.postings.get(&term).map_or(0, |p| p.len()) as f64;
        ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
    }

    fn term_weight(&self, idf: f64, tf: u32, pid: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = if self.avg_len > 0.0 {
            1.0 - b + b * self.doc_len[pid] as f64 / self.avg_len
        } else {
            1.0
        };
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    fn query_terms(query: &[TokenId]) -> impl Iterator<Item = TokenId> + '_ {
        query.iter().copied().filter(|&t| t as usize >= NUM_RESERVED)
    }

    /// BM25 score of one passage; every occurrence of a query term counts.
    pub fn score(&self, query: &[TokenId], pid: usize) -> f64 {
        let mut s = 0.0;
        for t in Self::query_terms(query) {
            let Some(posting) = self.postings.get(&t) else { continue };
            if let Ok(i) = posting.binary_search_by_key(&pid, |e| e.0) {
                s += self.term_weight(self.idf(t), posting[i].1, pid);
            }
        }
        s
    }

    /// Scores for every passage, accumulated term-at-a-time.
    pub fn score_all(&self, query: &[TokenId]) -> Vec<f64> {
        let mut scores = vec![0.0; self.len()];
        for t in Self::query_terms(query) {
            let Some(posting) = self.postings.get(&t) else { continue };
            let idf = self.idf(t);
            for &(pid, tf) in posting {
                scores[pid] += self.term_weight(idf, tf, pid);
            }
        }
        scores
    }

    /// Top-k `(passage_id, score)` by score descending, then lower id.
    pub fn top_k(&self, query: &[TokenId], k: usize) -> Result<Vec<(usize, f64)>> {
        let k = check_k(k, self.len())?;
        let mut ranked: Vec<(usize, f64)> = self.score_all(query).into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        if ranked.iter().all(|h| h.1 == 0.0) {
            log::warn!("no query term matched any passage; falling back to the {k} lowest passage ids");
        }
        Ok(ranked)
    }
}

/// BM25 retrieval: scores serve as logits; nothing is differentiable.
pub fn retrieve_bm25(
    x: &[TokenId],
    k: usize,
    bm25: &Bm25Index,
    store: &PassageStore,
    vocab: &Vocabulary,
) -> Result<RetrievedSet> {
    let hits = bm25.top_k(x, k)?;
    let docs = hits
        .iter()
        .map(|&(id, _)| {
            store
                .get(id)
                .map(|p| RetrievedDoc::new(p, vocab))
                .ok_or_else(|| Error::InvalidArgument(format!("bm25 passage {id} missing from store")))
        })
        .collect::<Result<Vec<_>>>()?;
    RetrievedSet::new(docs, hits.iter().map(|h| h.1).collect(), None)
}
