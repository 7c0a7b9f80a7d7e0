//! Chunk a few documents into passages, embed them with a fresh document
//! encoder, build an HNSW index, save and reload it, and query it.
//!
//! cargo run --release --example chunk_and_index

use ragx::corpus::{PassageStore, SourceDocument};
use ragx::index::{HnswParams, IndexHandle, SearchMode};
use ragx::model::{ModelConfig, RagModel};
use ragx::vocab::Vocabulary;

fn main() -> ragx::Result<()> {
    let docs = vec![
        SourceDocument {
            doc_id: "rivers".into(),
            title: "rivers".into(),
            body: "the nile flows north through egypt . the amazon carries more water than any other river . \
                   the danube crosses ten countries on its way to the black sea ."
                .into(),
        },
        SourceDocument {
            doc_id: "mountains".into(),
            title: "mountains".into(),
            body: "everest is the highest mountain above sea level . k2 lies on the border of pakistan and china ."
                .into(),
        },
    ];
    // Eight words per passage so each document yields several chunks.
    let store = PassageStore::from_documents(&docs, 8)?;
    for p in store.iter() {
        println!("passage {:>2} [{} #{}] {}", p.passage_id, p.doc_id, p.position, p.text);
    }

    let texts: Vec<String> = store.iter().map(|p| format!("{} {}", p.title, p.text)).collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), 1)?;
    let model = RagModel::init(vocab, ModelConfig::default())?;
    let handle = model.build_index(store, HnswParams::default(), "demo")?;

    let dir = tempfile::tempdir().expect("temporary directory");
    handle.save(dir.path())?;
    let reloaded = IndexHandle::load(dir.path())?;
    println!(
        "\nsaved and reloaded {} passages of dimension {}",
        reloaded.len(),
        reloaded.dim()
    );

    let query = "which river flows through egypt ?";
    for mode in [SearchMode::Exact, SearchMode::Hnsw] {
        let set = model.retrieve(
            &model.encode_text(query),
            3,
            ragx::model::RetrieverRef::Dense {
                handle: &reloaded,
                mode,
            },
        )?;
        println!("\n{mode:?} top-3 for {query:?}");
        for (doc, prior) in set.docs().iter().zip(set.priors()) {
            println!("  p={prior:.3}  {}", doc.passage.text);
        }
    }
    Ok(())
}
