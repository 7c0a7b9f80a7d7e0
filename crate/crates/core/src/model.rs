//! A complete model: vocabulary, encoder and generator configuration, and
//! every parameter, saved together as one directory.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::corpus::{Passage, PassageStore};
use crate::encoder::{encode_document, init_encoder, EncoderConfig, Side};
use crate::error::{Error, Result};
use crate::generator::{init_generator, Generator, GeneratorConfig};
use crate::index::{build_index, HnswParams, IndexHandle, SearchMode};
use crate::retriever::{retrieve_bm25, retrieve_dense, Bm25Index, RetrievedSet};
use crate::vocab::{TokenId, Vocabulary};

pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MODEL_CONFIG_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    pub seed: u64,
    /// Start the query encoder as an exact copy of the document encoder, so
    /// the untrained retriever already scores by token overlap.
    pub tie_query_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            generator: GeneratorConfig::default(),
            seed: 0,
            tie_query_init: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RagModel {
    pub vocab: Vocabulary,
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Where retrieval reads from.
#[derive(Clone, Copy)]
pub enum RetrieverRef<'a> {
    Dense {
        handle: &'a IndexHandle,
        mode: SearchMode,
    },
    Bm25 {
        index: &'a Bm25Index,
        store: &'a PassageStore,
    },
}

impl RetrieverRef<'_> {
    pub fn is_dense(&self) -> bool {
        matches!(self, RetrieverRef::Dense { .. })
    }

    pub fn store(&self) -> &PassageStore {
        match self {
            RetrieverRef::Dense { handle, .. } => handle.store(),
            RetrieverRef::Bm25 { store, .. } => store,
        }
    }
}

impl RagModel {
    /// Fresh parameters for `vocab`; the generator vocabulary size is taken
    /// from it.
    pub fn init(vocab: Vocabulary, mut config: ModelConfig) -> Result<Self> {
        config.generator.vocab_size = vocab.len();
        if config.encoder.dim == 0 {
            return Err(Error::Config("encoder dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        init_encoder(&mut params, Side::Document, &config.encoder, vocab.len(), &mut rng)?;
        init_encoder(&mut params, Side::Query, &config.encoder, vocab.len(), &mut rng)?;
        if config.tie_query_init {
            params.copy_prefix("denc.", "qenc.")?;
        }
        init_generator(&mut params, &config.generator, &mut rng)?;
        Ok(RagModel { vocab, config, params })
    }

    pub fn generator(&self) -> Generator<'_> {
        Generator::new(&self.config.generator, &self.params)
    }

    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        self.vocab.encode(text)
    }

    pub fn embed_passage(&self, passage: &Passage) -> Result<Vec<f64>> {
        encode_document(&self.config.encoder, &self.params, &self.vocab, passage)
    }

    /// Embeds `store` with the document encoder and builds the index.
    pub fn build_index(&self, store: PassageStore, hnsw: HnswParams, label: &str) -> Result<IndexHandle> {
        build_index(store, |p| self.embed_passage(p), hnsw, label)
    }

    pub fn retrieve(&self, x: &[TokenId], k: usize, retriever: RetrieverRef) -> Result<RetrievedSet> {
        match retriever {
            RetrieverRef::Dense { handle, mode } => {
                if handle.dim() != self.config.encoder.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.config.encoder.dim,
                        actual: handle.dim(),
                    });
                }
                retrieve_dense(x, k, handle, &self.config.encoder, &self.params, &self.vocab, mode)
            }
            RetrieverRef::Bm25 { index, store } => retrieve_bm25(x, k, index, store, &self.vocab),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join(PARAMS_FILE))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let path = dir.join(MODEL_CONFIG_FILE);
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_CONFIG_FILE);
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: ModelConfig = serde_json::from_str(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let params = ParamStore::load(&dir.join(PARAMS_FILE))?;
        if config.generator.vocab_size != vocab.len() {
            return Err(Error::format(
                dir,
                "vocabulary size disagrees with the generator config",
            ));
        }
        Ok(RagModel { vocab, config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Partition;
    use crate::encoder::encode_query;

    fn small() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                dim: 8,
                ..EncoderConfig::default()
            },
            generator: GeneratorConfig {
                dim: 8,
                ff_dim: 8,
                enc_layers: 1,
                dec_layers: 1,
                ..GeneratorConfig::default()
            },
            seed: 3,
            tie_query_init: true,
        }
    }

    #[test]
    fn tied_init_gives_equal_towers() {
        let vocab = Vocabulary::build(["a b c"], 1).unwrap();
        let m = RagModel::init(vocab, small()).unwrap();
        for (name, p) in m.params.partition(Partition::DocEncoder) {
            let q = m.params.get(&name.replacen("denc.", "qenc.", 1)).unwrap();
            assert_eq!(q.value, p.value);
        }
        let ids = m.vocab.encode("a b");
        let p = Passage {
            passage_id: 0,
            doc_id: "d".into(),
            title: String::new(),
            text: "x".into(),
            position: 0,
        };
        assert_ne!(
            m.embed_passage(&p).unwrap(),
            encode_query(&m.config.encoder, &m.params, &ids).unwrap()
        );
    }

    #[test]
    fn save_load_round_trip() {
        let vocab = Vocabulary::build(["a b c"], 1).unwrap();
        let m = RagModel::init(vocab, small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(RagModel::load(dir.path()).unwrap(), m);
    }
}
