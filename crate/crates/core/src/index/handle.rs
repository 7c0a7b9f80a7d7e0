use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dense::{DenseIndex, Hits};
use super::hnsw::{HnswGraph, HnswParams};
use crate::corpus::{Passage, PassageStore};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.bin";
pub const GRAPH_FILE: &str = "graph.bin";
pub const PASSAGES_FILE: &str = "passages.jsonl";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    Exact,
    Hnsw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub created_unix: u64,
    pub corpus_label: String,
    pub dim: usize,
    pub passages: usize,
    pub hnsw: HnswParams,
}

/// A dense index, its HNSW graph and the passages they describe.
/// Row `i` of the index is passage `i` of the store.
#[derive(Debug)]
pub struct IndexHandle {
    index: DenseIndex,
    graph: HnswGraph,
    store: PassageStore,
    meta: IndexMeta,
}

impl IndexHandle {
    pub fn new(index: DenseIndex, graph: HnswGraph, store: PassageStore, corpus_label: &str) -> Result<Self> {
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta = IndexMeta {
            created_unix,
            corpus_label: corpus_label.to_string(),
            dim: index.dim(),
            passages: index.len(),
            hnsw: *graph.params(),
        };
        Self::from_parts(index, graph, store, meta)
    }

    fn from_parts(index: DenseIndex, graph: HnswGraph, store: PassageStore, meta: IndexMeta) -> Result<Self> {
        if index.len() != store.len() || graph.len() != store.len() {
            return Err(Error::ShapeMismatch(format!(
                "index has {} rows and graph {} nodes but store has {} passages",
                index.len(),
                graph.len(),
                store.len()
            )));
        }
        if meta.dim != index.dim() || meta.passages != index.len() {
            return Err(Error::ShapeMismatch(
                "index metadata disagrees with index contents".into(),
            ));
        }
        Ok(IndexHandle {
            index,
            graph,
            store,
            meta,
        })
    }

    pub fn index(&self) -> &DenseIndex {
        &self.index
    }

    pub fn graph(&self) -> &HnswGraph {
        &self.graph
    }

    pub fn store(&self) -> &PassageStore {
        &self.store
    }

    pub fn meta(&self) -> &IndexMeta {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.index.dim()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn exact_search(&self, q: &[f64], k: usize) -> Result<Hits> {
        self.index.exact_search(q, k)
    }

    pub fn hnsw_search(&self, q: &[f64], k: usize) -> Result<Hits> {
        self.graph.search(&self.index, q, k, self.meta.hnsw.ef_search)
    }

    pub fn search(&self, q: &[f64], k: usize, mode: SearchMode) -> Result<Hits> {
        match mode {
            SearchMode::Exact => self.exact_search(q, k),
            SearchMode::Hnsw => self.hnsw_search(q, k),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.index.save(&dir.join(INDEX_FILE))?;
        self.graph.save(&dir.join(GRAPH_FILE))?;
        self.store.save(&dir.join(PASSAGES_FILE))?;
        let meta_path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index = DenseIndex::load(&dir.join(INDEX_FILE))?;
        let graph = HnswGraph::load(&dir.join(GRAPH_FILE))?;
        let store = PassageStore::load(&dir.join(PASSAGES_FILE))?;
        let meta_path = dir.join(META_FILE);
        let raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: IndexMeta = serde_json::from_str(&raw).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        Self::from_parts(index, graph, store, meta).map_err(|e| Error::format(dir, e.to_string()))
    }
}

/// Embeds every passage with `embed` (in parallel, results kept in id order),
/// stores the rows as `f32` and builds the HNSW graph over them.
pub fn build_index<F>(store: PassageStore, embed: F, hnsw: HnswParams, corpus_label: &str) -> Result<IndexHandle>
where
    F: Fn(&Passage) -> Result<Vec<f64>> + Sync,
{
    if store.is_empty() {
        return Err(Error::EmptyInput("passage store"));
    }
    let vectors: Vec<Vec<f64>> = store.passages().par_iter().map(&embed).collect::<Result<_>>()?;
    let dim = vectors[0].len();
    let rows = vectors
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>());
    let index = DenseIndex::from_rows(dim, rows)?;
    let graph = HnswGraph::build(&index, hnsw)?;
    log::info!("built index '{corpus_label}': {} passages, dim {dim}", index.len());
    IndexHandle::new(index, graph, store, corpus_label)
}

/// A shared, atomically replaceable reference to the active index.
/// Readers take a snapshot with [`IndexSlot::current`] and keep using it
/// for the whole request even if a swap happens meanwhile.
#[derive(Debug)]
pub struct IndexSlot {
    active: RwLock<Arc<IndexHandle>>,
}

impl IndexSlot {
    pub fn new(handle: Arc<IndexHandle>) -> Self {
        IndexSlot {
            active: RwLock::new(handle),
        }
    }

    pub fn current(&self) -> Arc<IndexHandle> {
        Arc::clone(&self.active.read().expect("index slot poisoned"))
    }

    /// Installs `replacement` if its dimension equals `query_dim`, returning
    /// the previously active handle.
    pub fn hot_swap(&self, replacement: Arc<IndexHandle>, query_dim: usize) -> Result<Arc<IndexHandle>> {
        if replacement.dim() != query_dim {
            return Err(Error::DimensionMismatch {
                expected: query_dim,
                actual: replacement.dim(),
            });
        }
        let mut guard = self.active.write().expect("index slot poisoned");
        log::info!(
            "swapping index '{}' -> '{}'",
            guard.meta.corpus_label,
            replacement.meta.corpus_label
        );
        Ok(std::mem::replace(&mut *guard, replacement))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SourceDocument;

    fn doc(id: &str, body: &str) -> SourceDocument {
        SourceDocument {
            doc_id: id.into(),
            title: id.into(),
            body: body.into(),
        }
    }

    /// Deterministic bag-of-characters embedding.
    fn embed(dim: usize) -> impl Fn(&Passage) -> Result<Vec<f64>> + Sync {
        move |p: &Passage| {
            let mut v = vec![0.0; dim];
            for (i, b) in p.text.bytes().chain(p.title.bytes()).enumerate() {
                v[(b as usize + i) % dim] += 1.0;
            }
            Ok(v)
        }
    }

    fn store(prefix: &str, n: usize) -> PassageStore {
        let docs: Vec<_> = (0..n)
            .map(|i| doc(&format!("{prefix}{i}"), &format!("passage number {i} about {prefix}")))
            .collect();
        PassageStore::from_documents(&docs, 100).unwrap()
    }

    #[test]
    fn one_row_per_passage() {
        let h = build_index(store("a", 4), embed(6), HnswParams::default(), "a").unwrap();
        assert_eq!(h.len(), 4);
        let ids: Vec<usize> = h.store().iter().map(|p| p.passage_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_store_is_rejected() {
        assert!(build_index(PassageStore::new(), embed(4), HnswParams::default(), "x").is_err());
    }

    #[test]
    fn save_load_preserves_search() {
        let h = build_index(store("a", 30), embed(6), HnswParams::default(), "a").unwrap();
        let dir = tempfile::tempdir().unwrap();
        h.save(dir.path()).unwrap();
        let back = IndexHandle::load(dir.path()).unwrap();
        assert_eq!(back.meta(), h.meta());
        assert_eq!(back.graph(), h.graph());
        let q = [1.0, -0.5, 0.25, 2.0, 0.0, 1.0];
        assert_eq!(back.exact_search(&q, 5).unwrap(), h.exact_search(&q, 5).unwrap());
        assert_eq!(back.hnsw_search(&q, 5).unwrap(), h.hnsw_search(&q, 5).unwrap());
    }

    #[test]
    fn identity_swap_keeps_results() {
        let h = Arc::new(build_index(store("a", 10), embed(6), HnswParams::default(), "a").unwrap());
        let slot = IndexSlot::new(Arc::clone(&h));
        let q = [0.3, 0.1, -0.2, 0.0, 0.5, 0.9];
        let before = slot.current().exact_search(&q, 3).unwrap();
        slot.hot_swap(Arc::clone(&h), 6).unwrap();
        assert_eq!(slot.current().exact_search(&q, 3).unwrap(), before);
    }

    #[test]
    fn swap_to_disjoint_corpus_only_returns_new_docs() {
        let a = Arc::new(build_index(store("a", 10), embed(6), HnswParams::default(), "a").unwrap());
        let b = Arc::new(build_index(store("b", 10), embed(6), HnswParams::default(), "b").unwrap());
        let slot = IndexSlot::new(a);
        let old = slot.hot_swap(b, 6).unwrap();
        assert_eq!(old.meta().corpus_label, "a");
        let cur = slot.current();
        for (id, _) in cur.exact_search(&[1.0; 6], 10).unwrap() {
            assert!(cur.store().get(id).unwrap().doc_id.starts_with('b'));
        }
    }

    #[test]
    fn swap_with_wrong_dimension_is_refused() {
        let a = Arc::new(build_index(store("a", 3), embed(6), HnswParams::default(), "a").unwrap());
        let b = Arc::new(build_index(store("b", 3), embed(5), HnswParams::default(), "b").unwrap());
        let slot = IndexSlot::new(a);
        assert!(matches!(slot.hot_swap(b, 6), Err(Error::DimensionMismatch { .. })));
        assert_eq!(slot.current().meta().corpus_label, "a");
    }
}
