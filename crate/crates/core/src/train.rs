//! Fine-tuning: mini-batch Adam on the marginal negative log-likelihood,
//! with the document encoder and index held fixed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, evaluate_with_gradient, AdamConfig, AdamState, Gradients, Partition, PartitionSet};
use crate::corpus::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};
use crate::index::SearchMode;
use crate::model::{RagModel, RetrieverRef};
use crate::rag::{nll_loss_on, LossSpec, RagMode};
use crate::vocab::TokenId;

/// One `(input, target)` pair, optionally with a class label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Example {
    pub fn new(input: impl Into<String>, target: impl Into<String>) -> Self {
        Example {
            input: input.into(),
            target: target.into(),
            label: None,
        }
    }
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, e)| e).collect())
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    write_jsonl(path, examples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    #[default]
    Dense,
    Bm25,
}

impl std::str::FromStr for RetrieverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(RetrieverKind::Dense),
            "bm25" => Ok(RetrieverKind::Bm25),
            _ => Err(Error::Config(format!("unknown retriever '{s}' (expected dense|bm25)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: RagMode,
    pub k: usize,
    pub retriever: RetrieverKind,
    pub freeze_retriever: bool,
    /// Keep the query encoder fixed for this many initial steps so the
    /// generator can learn to read passages before retrieval moves.
    pub retriever_warmup_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub search: SearchMode,
    pub clip_norm: f64,
    /// Process batch items on the calling thread only.
    pub single_threaded: bool,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: RagMode::Sequence,
            k: 5,
            retriever: RetrieverKind::Dense,
            freeze_retriever: false,
            retriever_warmup_steps: 0,
            lr: 1e-3,
            batch_size: 8,
            epochs: 1,
            max_steps: None,
            seed: 0,
            search: SearchMode::Exact,
            clip_norm: 1.0,
            single_threaded: false,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.batch_size == 0 {
            return Err(Error::Config("k and batch_size must be at least 1".into()));
        }
        if self.retriever == RetrieverKind::Bm25 && !self.freeze_retriever {
            return Err(Error::Config(
                "bm25 retrieval has no trainable parameters; set freeze_retriever".into(),
            ));
        }
        if self.lr.is_nan() || self.lr < 0.0 || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("lr must be >= 0 and clip_norm > 0".into()));
        }
        Ok(())
    }

    /// Partitions updated at `step`.
    pub fn trainable(&self, step: usize) -> PartitionSet {
        if self.retriever_frozen_at(step) {
            PartitionSet::of(&[Partition::Generator])
        } else {
            PartitionSet::fine_tuned()
        }
    }

    pub fn retriever_frozen_at(&self, step: usize) -> bool {
        self.freeze_retriever || step < self.retriever_warmup_steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    /// Summed negative log-likelihood over the batch.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Entropy of the retrieval priors, per batch item.
    pub entropies: Vec<f64>,
    /// Highest-prior passage id, per batch item.
    pub top1: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.steps)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Ok(TrainLog {
            steps: read_jsonl(path)?.into_iter().map(|(_, s)| s).collect(),
            checkpoints: Vec::new(),
        })
    }
}

struct Encoded {
    x: Vec<TokenId>,
    y: Vec<TokenId>,
}

struct ItemResult {
    loss: f64,
    grads: Gradients,
    entropy: f64,
    top1: usize,
}

fn item_step(
    model: &RagModel,
    item: &Encoded,
    retriever: RetrieverRef,
    cfg: &TrainConfig,
    step: usize,
) -> Result<ItemResult> {
    let set = model.retrieve(&item.x, cfg.k, retriever)?;
    let spec = LossSpec {
        gen: model.generator(),
        enc: &model.config.encoder,
        mode: cfg.mode,
        retriever_grad: !cfg.retriever_frozen_at(step) && retriever.is_dense(),
    };
    let (loss, grads) = evaluate_with_gradient(&model.params, cfg.trainable(step), |t, p| {
        nll_loss_on(t, &spec, p, &[(&item.x, &item.y, &set)])
    })?;
    Ok(ItemResult {
        loss,
        grads,
        entropy: set.entropy(),
        top1: set.docs()[0].passage.passage_id,
    })
}

/// Trains `model` in place. Retrieval is recomputed every step with the
/// current query encoder. With `out_dir`, periodic checkpoints and the
/// final model are written under it; on a non-finite loss the parameters
/// from before that step are saved to `out_dir/last_good`.
pub fn train(
    model: &mut RagModel,
    data: &[Example],
    retriever: RetrieverRef,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    if cfg.retriever == RetrieverKind::Dense && !retriever.is_dense()
        || cfg.retriever == RetrieverKind::Bm25 && retriever.is_dense()
    {
        return Err(Error::Config("retriever does not match the training config".into()));
    }
    let items: Vec<Encoded> = data
        .iter()
        .map(|e| Encoded {
            x: model.vocab.encode(&e.input),
            y: model.vocab.encode_target(&e.target),
        })
        .collect();
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let m: &RagModel = model;
            let results: Vec<ItemResult> = if cfg.single_threaded {
                batch
                    .iter()
                    .map(|&i| item_step(m, &items[i], retriever, cfg, step))
                    .collect::<Result<_>>()?
            } else {
                batch
                    .par_iter()
                    .map(|&i| item_step(m, &items[i], retriever, cfg, step))
                    .collect::<Result<_>>()?
            };
            let mut grads = Gradients::new();
            let mut loss = 0.0;
            for r in &results {
                loss += r.loss;
                grads.accumulate(&r.grads)?;
            }
            if !loss.is_finite() {
                if let Some(dir) = out_dir {
                    let path = dir.join("last_good");
                    model.save(&path)?;
                    log.checkpoints.push(path);
                    log.write_jsonl(&dir.join("train_log.jsonl"))?;
                }
                return Err(Error::NonFiniteLoss { step });
            }
            let grad_norm = grads.clip_global_norm(cfg.clip_norm);
            adam_step(&mut model.params, &grads, &mut state, &adam_cfg)?;
            log.steps.push(StepLog {
                step,
                epoch,
                loss,
                grad_norm,
                entropies: results.iter().map(|r| r.entropy).collect(),
                top1: results.iter().map(|r| r.top1).collect(),
            });
            log::debug!("step {step} loss {loss:.4} grad norm {grad_norm:.4}");
            step += 1;
            if let (Some(dir), Some(every)) = (out_dir, cfg.checkpoint_every) {
                if every > 0 && step % every == 0 {
                    let path = dir.join(format!("checkpoint-{step:06}"));
                    model.save(&path)?;
                    log.checkpoints.push(path);
                }
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("model");
        model.save(&path)?;
        log.checkpoints.push(path);
        log.write_jsonl(&dir.join("train_log.jsonl"))?;
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub queries: usize,
    pub mean_entropy: f64,
    /// Fraction of queries whose top-1 passage is the modal top-1 passage.
    pub concentration: f64,
    pub modal_passage: usize,
    pub collapsed: bool,
}

/// Collapse statistics from per-query entropies and top-1 passage ids.
pub fn collapse_stats(entropies: &[f64], top1: &[usize], threshold: f64) -> Result<CollapseReport> {
    if entropies.is_empty() || entropies.len() != top1.len() {
        return Err(Error::InvalidArgument(
            "need one entropy and one top-1 id per query".into(),
        ));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in top1 {
        *counts.entry(p).or_default() += 1;
    }
    // BTreeMap iterates ids ascending, so ties go to the lower id.
    let (modal_passage, modal_count) = counts
        .iter()
        .fold((0, 0), |best, (&p, &c)| if c > best.1 { (p, c) } else { best });
    let n = top1.len() as f64;
    let concentration = modal_count as f64 / n;
    Ok(CollapseReport {
        queries: top1.len(),
        mean_entropy: entropies.iter().sum::<f64>() / n,
        concentration,
        modal_passage,
        collapsed: concentration > threshold,
    })
}

/// Collapse statistics over the last `window` logged steps.
pub fn collapse_diagnostics(log: &TrainLog, window: usize, threshold: f64) -> Result<CollapseReport> {
    if window == 0 || window > log.steps.len() {
        return Err(Error::InvalidArgument(format!(
            "window {window} must be in 1..={}",
            log.steps.len()
        )));
    }
    let recent = &log.steps[log.steps.len() - window..];
    let entropies: Vec<f64> = recent.iter().flat_map(|s| s.entropies.iter().copied()).collect();
    let top1: Vec<usize> = recent.iter().flat_map(|s| s.top1.iter().copied()).collect();
    collapse_stats(&entropies, &top1, threshold)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_distinct_priors() {
        let k = 4;
        let h = entropy(&vec![0.25; k]);
        assert!((h - (k as f64).ln()).abs() < 1e-15);
        let r = collapse_stats(&[h; 5], &[10, 11, 12, 13, 14], 0.95).unwrap();
        assert!((r.mean_entropy - 4f64.ln()).abs() < 1e-15);
        assert!((r.concentration - 0.2).abs() < 1e-15);
        assert!(!r.collapsed);
        assert_eq!(r.modal_passage, 10);
    }

    #[test]
    fn same_top_passage_is_collapse() {
        let r = collapse_stats(&[0.1, 0.2, 0.3], &[7, 7, 7], 0.95).unwrap();
        assert_eq!(r.concentration, 1.0);
        assert!(r.collapsed);
    }

    #[test]
    fn hand_entropy() {
        // -(0.5 ln 0.5 + 0.25 ln 0.25 + 0.25 ln 0.25) = 1.5 ln 2
        let rows = [vec![0.5, 0.25, 0.25], vec![1.0, 0.0, 0.0]];
        let e: Vec<f64> = rows.iter().map(|r| entropy(r)).collect();
        assert!((e[0] - 1.5 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(e[1], 0.0);
        let r = collapse_stats(&e, &[1, 2], 0.95).unwrap();
        assert!((r.mean_entropy - 0.75 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn window_must_fit_the_log() {
        let log = TrainLog {
            steps: vec![StepLog {
                step: 0,
                epoch: 0,
                loss: 1.0,
                grad_norm: 0.0,
                entropies: vec![0.0],
                top1: vec![0],
            }],
            checkpoints: vec![],
        };
        assert!(collapse_diagnostics(&log, 2, 0.95).is_err());
        assert!(collapse_diagnostics(&log, 1, 0.95).unwrap().collapsed);
    }

    #[test]
    fn bm25_requires_frozen_retriever() {
        let cfg = TrainConfig {
            retriever: RetrieverKind::Bm25,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
