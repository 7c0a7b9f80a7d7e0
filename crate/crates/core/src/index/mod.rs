//! Dense inner-product index over passage embeddings: exact search, HNSW
//! approximate search, persistence and atomic replacement.

mod dense;
mod handle;
mod hnsw;

pub use dense::{DenseIndex, Hits};
pub use handle::{
    build_index, IndexHandle, IndexMeta, IndexSlot, SearchMode, GRAPH_FILE, INDEX_FILE, META_FILE, PASSAGES_FILE,
};
pub use hnsw::{HnswGraph, HnswParams};
