//! The two marginal likelihoods on a tiny random model: they sum to one over
//! all targets of a fixed length, agree on single-token targets, and give
//! class probabilities through single-token labels.
//!
//! cargo run --release --example rag_marginals

use ragx::autodiff::ParamStore;
use ragx::generator::{init_generator, Generator, GeneratorConfig};
use ragx::rag::{classify, rag_loglik, RagMode};
use ragx::retriever::{RetrievedDoc, RetrievedSet};
use ragx::vocab::TokenId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ragx::Result<()> {
    let vocab = 6;
    let cfg = GeneratorConfig {
        vocab_size: vocab,
        dim: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_dim: 16,
        max_source_len: 16,
        max_target_len: 4,
        embedding_std: 1.0,
    };
    let mut params = ParamStore::new();
    init_generator(&mut params, &cfg, &mut ChaCha8Rng::seed_from_u64(5))?;
    let gen = Generator::new(&cfg, &params);

    let docs = vec![
        RetrievedDoc::from_ids(0, vec![5], vec![1, 2]),
        RetrievedDoc::from_ids(1, vec![], vec![4, 4, 0]),
        RetrievedDoc::from_ids(2, vec![3], vec![5]),
    ];
    let set = RetrievedSet::from_priors(docs, &[0.6, 0.3, 0.1])?;
    let x: Vec<TokenId> = vec![1, 5, 2];

    for len in 1..=3u32 {
        for mode in [RagMode::Sequence, RagMode::Token] {
            let mut total = 0.0;
            for code in 0..vocab.pow(len) {
                let y: Vec<TokenId> = (0..len).map(|i| ((code / vocab.pow(i)) % vocab) as TokenId).collect();
                total += rag_loglik(&gen, &x, &y, &set, mode)?.log_prob.exp();
            }
            println!("length {len} {mode:?}: total probability {total:.12}");
        }
    }

    let y = [4 as TokenId, 2, 3];
    let seq = rag_loglik(&gen, &x, &y, &set, RagMode::Sequence)?;
    let tok = rag_loglik(&gen, &x, &y, &set, RagMode::Token)?;
    println!(
        "\ny = {y:?}: log p sequence {:.6}, token {:.6}",
        seq.log_prob, tok.log_prob
    );
    println!("per-document log p(y | x, z): {:.4?}", seq.per_doc);

    let classes = [3 as TokenId, 4, 5];
    for mode in [RagMode::Sequence, RagMode::Token] {
        println!(
            "{mode:?} class probabilities: {:.6?}",
            classify(&gen, &x, &classes, &set, mode)?
        );
    }
    Ok(())
}
