//! Greedy, token-level beam, Thorough and Fast decoding side by side on a
//! tiny random model, with the exhaustive argmax as reference.
//!
//! cargo run --release --example decoding [beam]

use ragx::autodiff::ParamStore;
use ragx::decode::{decode, exhaustive_argmax, BeamConfig, DecodeStrategy};
use ragx::generator::{init_generator, Generator, GeneratorConfig};
use ragx::rag::RagMode;
use ragx::retriever::{RetrievedDoc, RetrievedSet};
use ragx::vocab::TokenId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ragx::Result<()> {
    let beam: usize = std::env::args().nth(1).map_or(2, |s| s.parse().expect("beam width"));
    let cfg = GeneratorConfig {
        vocab_size: 7,
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
    init_generator(&mut params, &cfg, &mut ChaCha8Rng::seed_from_u64(11))?;
    let gen = Generator::new(&cfg, &params);
    let docs = (0..3)
        .map(|z| RetrievedDoc::from_ids(z, vec![5 + z as TokenId % 2], vec![6, z as TokenId]))
        .collect();
    let set = RetrievedSet::new(docs, vec![0.9, 0.4, -0.3], None)?;
    let x: Vec<TokenId> = vec![6, 5, 1];
    let beam_cfg = BeamConfig {
        beam,
        max_len: 4,
        ..BeamConfig::default()
    };

    for mode in [RagMode::Token, RagMode::Sequence] {
        let best = exhaustive_argmax(&gen, &x, &set, mode, 4)?;
        println!("{mode:?} exhaustive argmax {:?} score {:.5}", best.tokens, best.score);
    }
    println!();
    let runs = [
        (DecodeStrategy::Greedy, RagMode::Token),
        (DecodeStrategy::TokenBeam, RagMode::Token),
        (DecodeStrategy::Thorough, RagMode::Sequence),
        (DecodeStrategy::Fast, RagMode::Sequence),
    ];
    for (strategy, mode) in runs {
        let out = decode(&gen, &x, &set, strategy, mode, &beam_cfg)?;
        println!(
            "{strategy:?} (beam {beam}): {} hypotheses, {} step passes, {} rescore passes",
            out.hypotheses.len(),
            out.stats.step_passes,
            out.stats.rescore_passes
        );
        for h in out.hypotheses.iter().take(3) {
            println!("   {:?} score {:.5}", h.tokens, h.score);
        }
    }
    Ok(())
}
