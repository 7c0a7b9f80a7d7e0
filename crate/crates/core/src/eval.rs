//! Metrics and experiment harnesses: exact match, distinct n-gram ratio,
//! answer recall, the documents-retrieved sweep and the index hot-swap
//! matrix.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{decode, BeamConfig, DecodeStrategy};
use crate::error::{Error, Result};
use crate::index::{IndexHandle, IndexSlot, SearchMode};
use crate::model::{RagModel, RetrieverRef};
use crate::rag::RagMode;
use crate::retriever::RetrievedSet;
use crate::train::Example;

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1.0 iff the normalized prediction equals some normalized gold.
pub fn exact_match<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::EmptyInput("gold answers"));
    }
    let p = normalize_answer(prediction);
    Ok(if golds.iter().any(|g| normalize_answer(g.as_ref()) == p) {
        1.0
    } else {
        0.0
    })
}

/// Distinct n-grams over total n-grams, pooled across `texts`. Tokens are
/// whitespace-separated; n-grams never span two texts.
pub fn distinct_ngram_ratio<S: AsRef<str>>(texts: &[S], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    let mut distinct: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for text in texts {
        let toks: Vec<&str> = text.as_ref().split_whitespace().collect();
        for w in toks.windows(n) {
            distinct.insert(w.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("n-grams"));
    }
    Ok(distinct.len() as f64 / total as f64)
}

/// 1.0 iff some normalized answer occurs inside one of the top-`k`
/// normalized passage texts.
pub fn retrieval_recall<S: AsRef<str>>(set: &RetrievedSet, answers: &[S], k: usize) -> Result<f64> {
    if k > set.k() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} retrieved documents",
            set.k()
        )));
    }
    let answers: Vec<String> = answers
        .iter()
        .map(|a| normalize_answer(a.as_ref()))
        .filter(|a| !a.is_empty())
        .collect();
    let hit = set.docs()[..k].iter().any(|d| {
        let text = normalize_answer(&d.passage.text);
        answers.iter().any(|a| text.contains(a.as_str()))
    });
    Ok(if hit { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    ExactMatch,
    /// Distinct n-gram ratio over all predictions.
    Distinct(usize),
    /// Answer recall over the retrieved documents.
    Recall,
}

impl Metric {
    pub fn name(self) -> String {
        match self {
            Metric::ExactMatch => "em".into(),
            Metric::Distinct(n) => format!("distinct{n}"),
            Metric::Recall => "recall".into(),
        }
    }

    /// Parses a comma-separated list such as `em,distinct3,recall`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        s.split(',').map(|m| m.trim().parse()).collect()
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em" => Ok(Metric::ExactMatch),
            "recall" => Ok(Metric::Recall),
            _ => match s.strip_prefix("distinct").map(str::parse::<usize>) {
                Some(Ok(n)) if n > 0 => Ok(Metric::Distinct(n)),
                _ => Err(Error::Config(format!(
                    "unknown metric '{s}' (expected em|recall|distinctN)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Documents retrieved per input.
    pub n_docs: usize,
    pub mode: RagMode,
    pub strategy: DecodeStrategy,
    pub beam: BeamConfig,
    pub search: SearchMode,
    pub metrics: Vec<Metric>,
    pub single_threaded: bool,
}

impl Default for EvalConfig {
    /// Short-answer QA: RAG-Sequence, Thorough decoding over greedy
    /// per-document searches.
    fn default() -> Self {
        EvalConfig {
            n_docs: 5,
            mode: RagMode::Sequence,
            strategy: DecodeStrategy::Thorough,
            beam: BeamConfig {
                beam: 1,
                ..BeamConfig::default()
            },
            search: SearchMode::Exact,
            metrics: vec![Metric::ExactMatch, Metric::Recall],
            single_threaded: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub input: String,
    pub prediction: String,
    pub golds: Vec<String>,
    /// Exact match of `prediction`.
    pub score: f64,
    /// Passage ids retrieved, best first.
    pub retrieved: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub records: Vec<ExampleRecord>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per example: input, prediction, golds (`|`-joined), score.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("input\tprediction\tgolds\tscore\n");
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.input, r.prediction, r.golds.join("|"), r.score);
        }
        s
    }

    /// Writes `report.json` and `report.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let tsv = dir.join("report.tsv");
        fs::write(&tsv, self.to_tsv()).map_err(|e| Error::io(&tsv, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn map_ordered<T, R, F>(items: &[T], single_threaded: bool, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if single_threaded {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

/// Best hypothesis as text, or the empty string when decoding found none.
pub fn predict(model: &RagModel, x: &str, set: &RetrievedSet, cfg: &EvalConfig) -> Result<String> {
    let ids = model.encode_text(x);
    let out = decode(&model.generator(), &ids, set, cfg.strategy, cfg.mode, &cfg.beam)?;
    Ok(out.best().map(|h| model.vocab.decode(&h.tokens)).unwrap_or_default())
}

fn summarize(task: &str, records: Vec<ExampleRecord>, recalls: &[f64], metrics: &[Metric]) -> Result<EvalReport> {
    let n = records.len() as f64;
    let mut out = BTreeMap::new();
    for &m in metrics {
        let v = match m {
            Metric::ExactMatch => records.iter().map(|r| r.score).sum::<f64>() / n,
            Metric::Recall => recalls.iter().sum::<f64>() / n,
            Metric::Distinct(k) => {
                let preds: Vec<&str> = records.iter().map(|r| r.prediction.as_str()).collect();
                distinct_ngram_ratio(&preds, k)?
            }
        };
        out.insert(m.name(), v);
    }
    Ok(EvalReport {
        task: task.to_string(),
        metrics: out,
        records,
    })
}

/// Retrieves, decodes and scores every example. The target string is the
/// single gold answer.
pub fn evaluate(
    model: &RagModel,
    retriever: RetrieverRef,
    data: &[Example],
    cfg: &EvalConfig,
    task: &str,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation data"));
    }
    let rows = map_ordered(data, cfg.single_threaded, |ex| {
        let set = model.retrieve(&model.encode_text(&ex.input), cfg.n_docs, retriever)?;
        let recall = retrieval_recall(&set, std::slice::from_ref(&ex.target), set.k())?;
        let prediction = predict(model, &ex.input, &set, cfg)?;
        let golds = vec![ex.target.clone()];
        Ok((
            ExampleRecord {
                input: ex.input.clone(),
                score: exact_match(&prediction, &golds)?,
                prediction,
                golds,
                retrieved: set.passage_ids(),
            },
            recall,
        ))
    })?;
    let (records, recalls): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    summarize(task, records, &recalls, &cfg.metrics)
}

/// Metric values at each number of retrieved documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub ks: Vec<usize>,
    /// Metric name to one value per entry of `ks`.
    pub columns: BTreeMap<String, Vec<f64>>,
}

impl SweepTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(Vec::as_slice)
    }

    /// `k` then one column per metric.
    pub fn to_tsv(&self) -> String {
        let names: Vec<&String> = self.columns.keys().collect();
        let mut s = String::from("k");
        for n in &names {
            s.push('\t');
            s.push_str(n);
        }
        s.push('\n');
        for (i, k) in self.ks.iter().enumerate() {
            s.push_str(&k.to_string());
            for n in &names {
                let _ = write!(s, "\t{}", self.columns[*n][i]);
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates each metric at every `k` in `ks` without retraining. Each
/// input is retrieved once at the largest `k`; smaller sets are its
/// renormalized prefixes.
pub fn ndocs_sweep(
    model: &RagModel,
    retriever: RetrieverRef,
    data: &[Example],
    ks: &[usize],
    cfg: &EvalConfig,
) -> Result<SweepTable> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "ks must be positive and strictly ascending".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation data"));
    }
    let max_k = *ks.last().expect("nonempty");
    let per_example = map_ordered(data, cfg.single_threaded, |ex| {
        let full = model.retrieve(&model.encode_text(&ex.input), max_k, retriever)?;
        let golds = std::slice::from_ref(&ex.target);
        ks.iter()
            .map(|&k| {
                // An index smaller than k gives fewer documents; clamp.
                let set = full.truncate(k.min(full.k()))?;
                let recall = retrieval_recall(&set, golds, set.k())?;
                let prediction = if cfg.metrics.iter().any(|m| *m != Metric::Recall) {
                    predict(model, &ex.input, &set, cfg)?
                } else {
                    String::new()
                };
                Ok((exact_match(&prediction, golds)?, recall, prediction))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut columns = BTreeMap::new();
    let n = data.len() as f64;
    for &m in &cfg.metrics {
        let col = (0..ks.len())
            .map(|i| match m {
                Metric::ExactMatch => Ok(per_example.iter().map(|r| r[i].0).sum::<f64>() / n),
                Metric::Recall => Ok(per_example.iter().map(|r| r[i].1).sum::<f64>() / n),
                Metric::Distinct(order) => {
                    let preds: Vec<&str> = per_example.iter().map(|r| r[i].2.as_str()).collect();
                    distinct_ngram_ratio(&preds, order)
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        columns.insert(m.name(), col);
    }
    Ok(SweepTable {
        ks: ks.to_vec(),
        columns,
    })
}

/// Exact match for every (index, probe set) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotSwapMatrix {
    /// `em[i][j]`: index `i` (0 = A, 1 = B) answering probe set `j`.
    pub em: [[f64; 2]; 2],
    /// Whether the model parameters compared equal after all four cells.
    pub params_unchanged: bool,
}

/// Serves probes through one shared index slot, swapping A for B between
/// the two rows.
pub fn hot_swap_experiment(
    model: &RagModel,
    index_a: Arc<IndexHandle>,
    index_b: Arc<IndexHandle>,
    probes_a: &[Example],
    probes_b: &[Example],
    cfg: &EvalConfig,
) -> Result<HotSwapMatrix> {
    let before = model.params.clone();
    let slot = IndexSlot::new(index_a);
    let mut em = [[0.0; 2]; 2];
    let metrics = EvalConfig {
        metrics: vec![Metric::ExactMatch],
        ..cfg.clone()
    };
    for (i, next) in [Some(index_b), None].into_iter().enumerate() {
        let handle = slot.current();
        let retriever = RetrieverRef::Dense {
            handle: &handle,
            mode: cfg.search,
        };
        for (j, probes) in [probes_a, probes_b].into_iter().enumerate() {
            let label = format!("index {i} probes {j}");
            em[i][j] = evaluate(model, retriever, probes, &metrics, &label)?
                .metric("em")
                .expect("em requested");
        }
        if let Some(b) = next {
            slot.hot_swap(b, model.config.encoder.dim)?;
        }
    }
    Ok(HotSwapMatrix {
        em,
        params_unchanged: model.params == before,
    })
}
