//! BM25 retrieval as a drop-in replacement for the dense retriever: dev
//! recall of BM25 against the untrained dense retriever, then a short
//! generator-only training run on BM25 results.
//!
//! cargo run --release --example bm25_baseline

use std::path::Path;

use ragx::corpus::{PassageStore, DEFAULT_CHUNK_SIZE};
use ragx::eval::evaluate;
use ragx::index::HnswParams;
use ragx::model::{RagModel, RetrieverRef};
use ragx::retriever::{Bm25Index, Bm25Params};
use ragx::synthetic::{toy_qa_recipe, ToyQa};
use ragx::train::{train, RetrieverKind, TrainConfig};

fn main() -> ragx::Result<()> {
    let recipe = toy_qa_recipe();
    let qa = ToyQa::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy_qa"))?;
    let mut model = RagModel::init(qa.vocabulary()?, recipe.model.clone())?;
    let store = PassageStore::from_documents(&qa.corpus, DEFAULT_CHUNK_SIZE)?;
    let bm25 = Bm25Index::build(&store, &model.vocab, Bm25Params::default());
    let dense = model.build_index(store.clone(), HnswParams::default(), "toy_qa")?;

    let sparse = RetrieverRef::Bm25 {
        index: &bm25,
        store: &store,
    };
    let dense_ref = RetrieverRef::Dense {
        handle: &dense,
        mode: recipe.eval.search,
    };
    for (name, r) in [("bm25", sparse), ("dense (untrained)", dense_ref)] {
        let report = evaluate(&model, r, &qa.dev, &recipe.eval, name)?;
        println!("{name:<18} {:?}", report.metrics);
    }

    // BM25 has nothing to differentiate, so only the generator trains.
    let cfg = TrainConfig {
        retriever: RetrieverKind::Bm25,
        freeze_retriever: true,
        epochs: 3,
        ..recipe.train.clone()
    };
    let log = train(&mut model, &qa.train, sparse, &cfg, None)?;
    let report = evaluate(&model, sparse, &qa.dev, &recipe.eval, "bm25")?;
    println!("after {} steps on bm25: {:?}", log.steps.len(), report.metrics);
    Ok(())
}
