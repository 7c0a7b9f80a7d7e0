//! The two bi-encoder towers: query encoder and document encoder.
//!
//! Both share one architecture and live in separate parameter partitions
//! (`qenc.*` / `denc.*`). Token embeddings are pooled into a single vector,
//! then passed through a dense layer with tanh.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Partition, Tape, Var};
use crate::corpus::Passage;
use crate::error::{Error, Result};
use crate::nn::{self, Init};
use crate::vocab::{TokenId, Vocabulary, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Embedding, mean pooling, dense + tanh.
    MeanPool,
    /// As `MeanPool` with one pre-norm self-attention block before pooling.
    SelfAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub max_len: usize,
    pub kind: EncoderKind,
    pub heads: usize,
    pub embedding_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            max_len: 128,
            kind: EncoderKind::MeanPool,
            heads: 2,
            embedding_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Document,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::Query => "qenc",
            Side::Document => "denc",
        }
    }

    pub fn partition(self) -> Partition {
        match self {
            Side::Query => Partition::QueryEncoder,
            Side::Document => Partition::DocEncoder,
        }
    }
}

pub fn init_encoder<R: Rng>(
    store: &mut ParamStore,
    side: Side,
    cfg: &EncoderConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<()> {
    let pre = side.prefix();
    let d = cfg.dim;
    let mut init = Init {
        store,
        rng,
        partition: side.partition(),
    };
    init.normal(format!("{pre}.tok_emb"), vocab_size, d, cfg.embedding_std)?;
    if cfg.kind == EncoderKind::SelfAttention {
        init.normal(format!("{pre}.pos"), cfg.max_len, d, 0.02)?;
        init.layer_norm(&format!("{pre}.ln"), d)?;
        init.attention(&format!("{pre}.attn"), d)?;
    }
    init.weight(format!("{pre}.dense.w"), d, d)?;
    init.fill(format!("{pre}.dense.b"), d, 0.0)
}

/// Token form fed to the document encoder: `title SEP text`.
pub fn document_tokens(vocab: &Vocabulary, passage: &Passage) -> Vec<TokenId> {
    let mut ids = vocab.encode(&passage.title);
    ids.push(SEP);
    ids.extend(vocab.encode(&passage.text));
    ids
}

#[derive(Clone, Copy)]
pub struct Encoder<'a> {
    pub cfg: &'a EncoderConfig,
    pub params: &'a ParamStore,
    pub side: Side,
}

impl<'a> Encoder<'a> {
    pub fn new(cfg: &'a EncoderConfig, params: &'a ParamStore, side: Side) -> Self {
        Encoder { cfg, params, side }
    }

    /// Encodes `ids` (truncated to `max_len`) on `tape`, giving a `1 x dim` row.
    pub fn encode_on(&self, t: &mut Tape, ids: &[TokenId]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("encoder input"));
        }
        let ids: Vec<usize> = ids.iter().take(self.cfg.max_len).map(|&i| i as usize).collect();
        let pre = self.side.prefix();
        let p = self.params;
        let table = t.param(p, &format!("{pre}.tok_emb"))?;
        let vocab = t.value(table).rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let mut h = t.index_select_rows(table, &ids);
        if self.cfg.kind == EncoderKind::SelfAttention {
            let pos = t.param(p, &format!("{pre}.pos"))?;
            let pos = t.slice_rows(pos, 0, ids.len());
            h = t.add(h, pos);
            let normed = nn::layer_norm(t, p, &format!("{pre}.ln"), h)?;
            let a = nn::attention(t, p, &format!("{pre}.attn"), normed, normed, self.cfg.heads, None)?;
            h = t.add(h, a);
        }
        let pooled = t.mean_rows(h);
        let out = nn::linear(t, p, &format!("{pre}.dense.w"), &format!("{pre}.dense.b"), pooled)?;
        Ok(t.tanh(out))
    }

    pub fn encode(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        let mut t = Tape::inference();
        let v = self.encode_on(&mut t, ids)?;
        t.check()?;
        Ok(t.value(v).data().to_vec())
    }
}

pub fn encode_query(cfg: &EncoderConfig, params: &ParamStore, x: &[TokenId]) -> Result<Vec<f64>> {
    Encoder::new(cfg, params, Side::Query).encode(x)
}

pub fn encode_document(
    cfg: &EncoderConfig,
    params: &ParamStore,
    vocab: &Vocabulary,
    passage: &Passage,
) -> Result<Vec<f64>> {
    if passage.title.trim().is_empty() && passage.text.trim().is_empty() {
        return Err(Error::EmptyInput("passage"));
    }
    Encoder::new(cfg, params, Side::Document).encode(&document_tokens(vocab, passage))
}
