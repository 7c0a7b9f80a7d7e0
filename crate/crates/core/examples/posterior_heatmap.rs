//! Per-token document posteriors of the gold answer to a held-out facts
//! probe, printed as a text heat map and optionally written as TSV. The
//! value token should be explained by the one passage that states it.
//!
//! cargo run --release --example posterior_heatmap [out.tsv]

use std::path::Path;

use ragx::corpus::{PassageStore, DEFAULT_CHUNK_SIZE};
use ragx::eval::predict;
use ragx::index::HnswParams;
use ragx::model::{RagModel, RetrieverRef};
use ragx::rag::token_doc_posterior;
use ragx::synthetic::{facts_recipe, FactsBundle};
use ragx::train::train;

const SHADES: [char; 5] = [' ', '.', ':', '+', '#'];

fn main() -> ragx::Result<()> {
    let recipe = facts_recipe();
    let facts = FactsBundle::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/facts"))?;
    let mut model = RagModel::init(facts.vocabulary()?, recipe.model.clone())?;
    let store = PassageStore::from_documents(&facts.corpus_a, DEFAULT_CHUNK_SIZE)?;
    let index = model.build_index(store, HnswParams::default(), "facts_a")?;
    let retriever = RetrieverRef::Dense {
        handle: &index,
        mode: recipe.eval.search,
    };
    train(&mut model, &facts.train, retriever, &recipe.train, None)?;

    let ex = &facts.probes_a[0];
    let x = model.encode_text(&ex.input);
    let set = model.retrieve(&x, recipe.eval.n_docs, retriever)?;
    let answer = predict(&model, &ex.input, &set, &recipe.eval)?;
    println!("question: {}\nanswer:   {answer} (gold {})\n", ex.input, ex.target);
    for (z, doc) in set.docs().iter().enumerate() {
        println!("z{z}: prior {:.3}  {}", set.priors()[z], doc.passage.text);
    }

    let y = model.vocab.encode_target(&ex.target);
    let post = token_doc_posterior(&model.generator(), &x, &y, &set)?;
    println!(
        "\ntoken      {}",
        (0..set.k()).map(|z| format!("z{z}")).collect::<Vec<_>>().join(" ")
    );
    for (tok, row) in post.tokens.iter().zip(&post.rows) {
        let cells: String = row
            .iter()
            .map(|p| format!(" {} ", SHADES[((p * 4.0).round() as usize).min(4)]))
            .collect();
        println!("{:<10}{cells}", model.vocab.token(*tok).unwrap_or("?"));
    }
    if let Some(path) = std::env::args().nth(1) {
        post.write_tsv(Path::new(&path), Some(&model.vocab))?;
        println!("\nwrote {path}");
    }
    Ok(())
}
