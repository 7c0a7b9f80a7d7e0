//! Train once against corpus A, then answer probes with corpus A and with
//! corpus B swapped into the same index slot. Answers follow the index
//! while the parameters stay untouched.
//!
//! cargo run --release --example hot_swap [epochs]

use std::path::Path;
use std::sync::Arc;

use ragx::corpus::{PassageStore, DEFAULT_CHUNK_SIZE};
use ragx::eval::hot_swap_experiment;
use ragx::index::HnswParams;
use ragx::model::{RagModel, RetrieverRef};
use ragx::synthetic::{facts_recipe, FactsBundle};
use ragx::train::{train, TrainConfig};

fn main() -> ragx::Result<()> {
    let recipe = facts_recipe();
    let epochs: usize = std::env::args()
        .nth(1)
        .map_or(recipe.train.epochs, |s| s.parse().expect("epochs"));
    let facts = FactsBundle::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/facts"))?;
    let mut model = RagModel::init(facts.vocabulary()?, recipe.model.clone())?;

    let index = |docs| -> ragx::Result<_> {
        let store = PassageStore::from_documents(docs, DEFAULT_CHUNK_SIZE)?;
        Ok(Arc::new(model.build_index(store, HnswParams::default(), "facts")?))
    };
    let (a, b) = (index(&facts.corpus_a)?, index(&facts.corpus_b)?);

    let cfg = TrainConfig {
        epochs,
        ..recipe.train.clone()
    };
    let retriever = RetrieverRef::Dense {
        handle: &a,
        mode: cfg.search,
    };
    let log = train(&mut model, &facts.train, retriever, &cfg, None)?;
    println!("trained {} steps on corpus A", log.steps.len());

    let m = hot_swap_experiment(&model, a, b, &facts.probes_a, &facts.probes_b, &recipe.eval)?;
    println!("exact match   probes A  probes B");
    for (name, row) in ["index A", "index B"].iter().zip(m.em) {
        println!("{name:<12} {:>9.3} {:>9.3}", row[0], row[1]);
    }
    println!("parameters unchanged: {}", m.params_unchanged);
    Ok(())
}
