//! Train on the bundled toy QA task with the query encoder trainable,
//! then report dev exact match, retrieval recall and an n-docs sweep.
//!
//! cargo run --release --example train_toy_qa [epochs]

use std::path::Path;
use std::time::Instant;

use ragx::corpus::{PassageStore, DEFAULT_CHUNK_SIZE};
use ragx::eval::{evaluate, ndocs_sweep};
use ragx::index::HnswParams;
use ragx::model::{RagModel, RetrieverRef};
use ragx::synthetic::{toy_qa_recipe, ToyQa};
use ragx::train::{train, TrainConfig};

fn main() -> ragx::Result<()> {
    let recipe = toy_qa_recipe();
    let epochs: usize = std::env::args()
        .nth(1)
        .map_or(recipe.train.epochs, |s| s.parse().expect("epochs"));
    let qa = ToyQa::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy_qa"))?;
    println!(
        "{} passages, {} train, {} dev",
        qa.corpus.len(),
        qa.train.len(),
        qa.dev.len()
    );

    let mut model = RagModel::init(qa.vocabulary()?, recipe.model.clone())?;
    let store = PassageStore::from_documents(&qa.corpus, DEFAULT_CHUNK_SIZE)?;
    // The document encoder is never trained, so the index stays valid.
    let index = model.build_index(store, HnswParams::default(), "toy_qa")?;
    let retriever = RetrieverRef::Dense {
        handle: &index,
        mode: recipe.eval.search,
    };

    let before = evaluate(&model, retriever, &qa.dev, &recipe.eval, "dev")?;
    println!("before training: {:?}", before.metrics);

    let cfg = TrainConfig {
        epochs,
        ..recipe.train.clone()
    };
    let t0 = Instant::now();
    let log = train(&mut model, &qa.train, retriever, &cfg, None)?;
    let losses = log.losses();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let w = losses.len().min(20);
    println!(
        "{} steps in {:.1?}; mean batch loss first {w}: {:.3}, last {w}: {:.3}",
        losses.len(),
        t0.elapsed(),
        mean(&losses[..w]),
        mean(&losses[losses.len() - w..])
    );

    let after = evaluate(&model, retriever, &qa.dev, &recipe.eval, "dev")?;
    println!("after training: {:?}", after.metrics);
    for r in after.records.iter().take(5) {
        println!("  {:<32} -> {:<10} gold {}", r.input, r.prediction, r.golds[0]);
    }
    let sweep = ndocs_sweep(&model, retriever, &qa.dev, &[1, 2, 5, 10], &recipe.eval)?;
    print!("\n{}", sweep.to_tsv());
    Ok(())
}
