//! Watch for retrieval collapse during joint training: per-window prior
//! entropy and how concentrated the top-1 passage is across queries.
//! An aggressive learning rate makes the drift visible.
//!
//! cargo run --release --example collapse_diagnostics [lr] [epochs]

use std::path::Path;

use ragx::corpus::{PassageStore, DEFAULT_CHUNK_SIZE};
use ragx::index::HnswParams;
use ragx::model::{RagModel, RetrieverRef};
use ragx::synthetic::{toy_qa_recipe, ToyQa};
use ragx::train::{collapse_diagnostics, collapse_stats, train, TrainConfig};

fn main() -> ragx::Result<()> {
    let mut args = std::env::args().skip(1);
    let lr: f64 = args.next().map_or(1e-2, |s| s.parse().expect("learning rate"));
    let epochs: usize = args.next().map_or(3, |s| s.parse().expect("epochs"));
    let recipe = toy_qa_recipe();
    let qa = ToyQa::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy_qa"))?;
    let mut model = RagModel::init(qa.vocabulary()?, recipe.model.clone())?;
    let store = PassageStore::from_documents(&qa.corpus, DEFAULT_CHUNK_SIZE)?;
    let index = model.build_index(store, HnswParams::default(), "toy_qa")?;
    let retriever = RetrieverRef::Dense {
        handle: &index,
        mode: recipe.train.search,
    };
    let cfg = TrainConfig {
        lr,
        epochs,
        ..recipe.train.clone()
    };
    let log = train(&mut model, &qa.train, retriever, &cfg, None)?;

    let threshold = 0.5;
    println!(
        "{:>6} {:>10} {:>10} {:>14} {:>6}",
        "steps", "loss", "entropy", "concentration", "modal"
    );
    for (i, w) in log.steps.chunks(25).enumerate() {
        let entropies: Vec<f64> = w.iter().flat_map(|s| s.entropies.iter().copied()).collect();
        let top1: Vec<usize> = w.iter().flat_map(|s| s.top1.iter().copied()).collect();
        let r = collapse_stats(&entropies, &top1, threshold)?;
        let loss = w.iter().map(|s| s.loss).sum::<f64>() / w.len() as f64;
        println!(
            "{:>6} {loss:>10.3} {:>10.3} {:>14.3} {:>6}",
            i * 25,
            r.mean_entropy,
            r.concentration,
            r.modal_passage
        );
    }
    let last = collapse_diagnostics(&log, 50.min(log.steps.len()), threshold)?;
    println!("\nlast 50 steps: {last:?}");
    if last.collapsed {
        println!("retrieval has collapsed onto passage {}", last.modal_passage);
    }
    Ok(())
}
