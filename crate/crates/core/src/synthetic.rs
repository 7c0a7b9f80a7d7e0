//! Seeded synthetic datasets small enough to train on a laptop.
//!
//! Entity and value tokens have fixed-width names (`land007`, `chief042`)
//! so that no name is a substring of another and answer recall by
//! substring has no false positives.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_documents, write_documents, SourceDocument};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Metric};
use crate::generator::GeneratorConfig;
use crate::model::ModelConfig;
use crate::train::{read_examples, write_examples, Example, TrainConfig};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactsConfig {
    /// Entities whose fact is the same in both corpora; used for training.
    pub train_entities: usize,
    /// Held-out entities whose fact differs between the corpora.
    pub eval_entities: usize,
    /// Size of the shared pool of answer values.
    pub values: usize,
    pub seed: u64,
}

impl Default for FactsConfig {
    fn default() -> Self {
        FactsConfig {
            train_entities: 900,
            eval_entities: 60,
            values: 100,
            seed: 2016,
        }
    }
}

/// Two versions of a world (`a`, `b`) that disagree on every held-out
/// entity, training probes over the shared entities, and held-out probes
/// answered by each version.
#[derive(Debug, Clone, PartialEq)]
pub struct FactsBundle {
    pub corpus_a: Vec<SourceDocument>,
    pub corpus_b: Vec<SourceDocument>,
    pub train: Vec<Example>,
    pub probes_a: Vec<Example>,
    pub probes_b: Vec<Example>,
}

const FACT_TEMPLATES: [&str; 2] = ["who is the leader of {e} ?", "who leads {e} ?"];

fn land(i: usize) -> String {
    format!("land{i:03}")
}

fn chief(i: usize) -> String {
    format!("chief{i:03}")
}

fn fact_doc(entity: &str, value: &str) -> SourceDocument {
    SourceDocument {
        doc_id: entity.to_string(),
        title: entity.to_string(),
        body: format!("the leader of {entity} is {value} ."),
    }
}

pub fn synthetic_facts(cfg: &FactsConfig) -> Result<FactsBundle> {
    if cfg.values < 2 || cfg.train_entities == 0 || cfg.eval_entities == 0 {
        return Err(Error::Config(
            "facts need at least 2 values and 1 entity per split".into(),
        ));
    }
    if cfg.train_entities + cfg.eval_entities > 1000 || cfg.values > 1000 {
        return Err(Error::Config(
            "facts names are 3 digits wide; at most 1000 of each".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = FactsBundle {
        corpus_a: Vec::new(),
        corpus_b: Vec::new(),
        train: Vec::new(),
        probes_a: Vec::new(),
        probes_b: Vec::new(),
    };
    for i in 0..cfg.train_entities + cfg.eval_entities {
        let e = land(i);
        let va = rng.random_range(0..cfg.values);
        let vb = if i < cfg.train_entities {
            va
        } else {
            (va + rng.random_range(1..cfg.values)) % cfg.values
        };
        b.corpus_a.push(fact_doc(&e, &chief(va)));
        b.corpus_b.push(fact_doc(&e, &chief(vb)));
        if i < cfg.train_entities {
            for t in FACT_TEMPLATES {
                b.train.push(Example::new(t.replace("{e}", &e), chief(va)));
            }
        } else {
            let q = FACT_TEMPLATES[0].replace("{e}", &e);
            b.probes_a.push(Example::new(q.clone(), chief(va)));
            b.probes_b.push(Example::new(q, chief(vb)));
        }
    }
    Ok(b)
}

pub const CORPUS_A_FILE: &str = "corpus_a.jsonl";
pub const CORPUS_B_FILE: &str = "corpus_b.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const PROBES_A_FILE: &str = "probes_a.jsonl";
pub const PROBES_B_FILE: &str = "probes_b.jsonl";

impl FactsBundle {
    /// Every token in either corpus and in any probe.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let docs = self.corpus_a.iter().chain(&self.corpus_b);
        let examples = self.train.iter().chain(&self.probes_a).chain(&self.probes_b);
        Vocabulary::build(
            docs.flat_map(|d| [d.title.as_str(), d.body.as_str()])
                .chain(examples.flat_map(|e| [e.input.as_str(), e.target.as_str()])),
            1,
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_documents(&dir.join(CORPUS_A_FILE), &self.corpus_a)?;
        write_documents(&dir.join(CORPUS_B_FILE), &self.corpus_b)?;
        write_examples(&dir.join(TRAIN_FILE), &self.train)?;
        write_examples(&dir.join(PROBES_A_FILE), &self.probes_a)?;
        write_examples(&dir.join(PROBES_B_FILE), &self.probes_b)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(FactsBundle {
            corpus_a: read_documents(&dir.join(CORPUS_A_FILE))?,
            corpus_b: read_documents(&dir.join(CORPUS_B_FILE))?,
            train: read_examples(&dir.join(TRAIN_FILE))?,
            probes_a: read_examples(&dir.join(PROBES_A_FILE))?,
            probes_b: read_examples(&dir.join(PROBES_B_FILE))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyQaConfig {
    pub persons: usize,
    /// People held out of training; dev questions are about them.
    pub dev_persons: usize,
    pub towns: usize,
    /// Filler words around each fact; more filler means a weaker untrained
    /// retriever.
    pub filler_words: usize,
    pub filler_vocab: usize,
    pub seed: u64,
}

impl Default for ToyQaConfig {
    fn default() -> Self {
        ToyQaConfig {
            persons: 300,
            dev_persons: 100,
            towns: 400,
            filler_words: 0,
            filler_vocab: 30,
            seed: 7,
        }
    }
}

/// One passage per person naming their town, training questions in two
/// phrasings over the training people, and dev questions about held-out
/// people.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyQa {
    pub corpus: Vec<SourceDocument>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

const QA_TRAIN_TEMPLATES: [&str; 2] = ["where does {e} live ?", "what town is {e} from ?"];

pub fn toy_qa(cfg: &ToyQaConfig) -> Result<ToyQa> {
    let total = cfg.persons + cfg.dev_persons;
    if cfg.persons == 0 || cfg.dev_persons == 0 || cfg.towns < total || cfg.filler_vocab == 0 {
        return Err(Error::Config(
            "toy QA needs people in both splits, a town per person and filler words".into(),
        ));
    }
    if cfg.towns > 1000 || cfg.filler_vocab > 1000 {
        return Err(Error::Config(
            "toy QA names are 3 digits wide; at most 1000 of each".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut towns: Vec<usize> = (0..cfg.towns).collect();
    towns.shuffle(&mut rng);
    let mut qa = ToyQa {
        corpus: Vec::new(),
        train: Vec::new(),
        dev: Vec::new(),
    };
    for (i, t) in towns.iter().enumerate().take(total) {
        let person = format!("pers{i:03}");
        let town = format!("town{t:03}");
        let mut words: Vec<String> = (0..cfg.filler_words)
            .map(|_| format!("word{:03}", rng.random_range(0..cfg.filler_vocab)))
            .collect();
        let at = rng.random_range(0..=words.len());
        words.insert(at, format!("{person} lives in {town} ."));
        qa.corpus.push(SourceDocument {
            doc_id: person.clone(),
            title: person.clone(),
            body: words.join(" "),
        });
        if i < cfg.persons {
            for t in QA_TRAIN_TEMPLATES {
                qa.train.push(Example::new(t.replace("{e}", &person), town.clone()));
            }
        } else {
            qa.dev
                .push(Example::new(QA_TRAIN_TEMPLATES[0].replace("{e}", &person), town));
        }
    }
    Ok(qa)
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";

impl ToyQa {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_documents(&dir.join(CORPUS_FILE), &self.corpus)?;
        write_examples(&dir.join(TRAIN_FILE), &self.train)?;
        write_examples(&dir.join(DEV_FILE), &self.dev)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(ToyQa {
            corpus: read_documents(&dir.join(CORPUS_FILE))?,
            train: read_examples(&dir.join(TRAIN_FILE))?,
            dev: read_examples(&dir.join(DEV_FILE))?,
        })
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let examples = self.train.iter().chain(&self.dev);
        Vocabulary::build(
            self.corpus
                .iter()
                .flat_map(|d| [d.title.as_str(), d.body.as_str()])
                .chain(examples.flat_map(|e| [e.input.as_str(), e.target.as_str()])),
            1,
        )
    }
}

/// Model, training and evaluation settings that go together for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn small_generator(max_source_len: usize) -> GeneratorConfig {
    GeneratorConfig {
        dim: 32,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_dim: 64,
        max_source_len,
        max_target_len: 8,
        ..GeneratorConfig::default()
    }
}

/// Settings for the facts task. The retriever stays frozen: a wide random
/// encoder already finds the right passage, and with the retriever fixed
/// the generator learns to copy the value out of it.
pub fn facts_recipe() -> Recipe {
    Recipe {
        model: ModelConfig {
            encoder: EncoderConfig {
                dim: 256,
                ..EncoderConfig::default()
            },
            generator: small_generator(32),
            seed: 1,
            tie_query_init: true,
        },
        train: TrainConfig {
            freeze_retriever: true,
            lr: 3e-3,
            epochs: 5,
            ..TrainConfig::default()
        },
        eval: EvalConfig::default(),
    }
}

/// Settings for the toy QA task, with the query encoder trainable.
pub fn toy_qa_recipe() -> Recipe {
    Recipe {
        model: ModelConfig {
            encoder: EncoderConfig::default(),
            generator: small_generator(48),
            seed: 1,
            tie_query_init: true,
        },
        train: TrainConfig {
            lr: 1e-3,
            epochs: 10,
            ..TrainConfig::default()
        },
        eval: EvalConfig {
            metrics: vec![Metric::ExactMatch, Metric::Recall],
            ..EvalConfig::default()
        },
    }
}
