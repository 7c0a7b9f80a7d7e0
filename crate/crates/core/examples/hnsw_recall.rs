//! Recall of HNSW search against exact inner-product search as the search
//! beam `ef` grows.
//!
//! cargo run --release --example hnsw_recall [n] [dim]

use std::time::Instant;

use ragx::index::{DenseIndex, HnswGraph, HnswParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn main() -> ragx::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(10_000, |s| s.parse().expect("n"));
    let dim: usize = args.next().map_or(32, |s| s.parse().expect("dim"));
    let (queries, k) = (200, 10);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows = (0..n).map(|_| unit(&mut rng, dim).into_iter().map(|x| x as f32).collect());
    let index = DenseIndex::from_rows(dim, rows)?;
    let params = HnswParams::default();
    let t0 = Instant::now();
    let graph = HnswGraph::build(&index, params)?;
    println!(
        "built HNSW over {n} x {dim} in {:.2?} (m={}, ef_construction={})",
        t0.elapsed(),
        params.m,
        params.ef_construction
    );

    let qs: Vec<Vec<f64>> = (0..queries).map(|_| unit(&mut rng, dim)).collect();
    let truth: Vec<Vec<usize>> = qs
        .iter()
        .map(|q| Ok(index.exact_search(q, k)?.into_iter().map(|h| h.0).collect()))
        .collect::<ragx::Result<_>>()?;
    println!("{:>6} {:>10} {:>12}", "ef", "recall@10", "us/query");
    for ef in [10, 20, 40, 80, 128, 256] {
        let t0 = Instant::now();
        let mut found = 0;
        for (q, t) in qs.iter().zip(&truth) {
            found += graph
                .graph_search(&index, q, k, ef)
                .iter()
                .filter(|h| t.contains(&h.0))
                .count();
        }
        let per_query = t0.elapsed().as_micros() as f64 / queries as f64;
        println!(
            "{ef:>6} {:>10.3} {per_query:>12.1}",
            found as f64 / (queries * k) as f64
        );
    }
    Ok(())
}
