//! Hierarchical navigable small-world graph over inner-product similarity.
//!
//! Construction inserts rows in id order; node levels come from a seeded
//! ChaCha stream, so a build is a pure function of (rows, params).
//! Neighbour lists use the diversity heuristic and are topped up with
//! pruned candidates up to capacity.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dense::{rank_order, DenseIndex, Hits};
use crate::autodiff::ByteReader;
use crate::error::{Error, Result};

const GRAPH_MAGIC: &[u8; 4] = b"RAGH";
const GRAPH_VERSION: u32 = 1;
const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    /// Level multiplier; `None` means `1 / ln(m)`.
    pub level_mult: Option<f64>,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            ef_search: 128,
            level_mult: None,
            seed: 0,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("hnsw m must be at least 2, got {}", self.m)));
        }
        if self.ef_construction == 0 || self.ef_search == 0 {
            return Err(Error::Config("hnsw ef values must be positive".into()));
        }
        Ok(())
    }

    fn mult(&self) -> f64 {
        self.level_mult.unwrap_or(1.0 / (self.m as f64).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    score: f64,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    /// Greater is better: higher score, then lower id.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswGraph {
    params: HnswParams,
    /// `links[node][layer]`, layers `0..=level(node)`.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
}

struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited {
            marks: vec![0; n],
            epoch: 0,
        }
    }

    fn reset(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// Marks `i`; returns false if it was already marked this epoch.
    fn insert(&mut self, i: u32) -> bool {
        let m = &mut self.marks[i as usize];
        if *m == self.epoch {
            false
        } else {
            *m = self.epoch;
            true
        }
    }
}

impl HnswGraph {
    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn level(&self, node: usize) -> usize {
        self.links[node].len() - 1
    }

    pub fn neighbors(&self, node: usize, layer: usize) -> &[u32] {
        &self.links[node][layer]
    }

    pub fn build(index: &DenseIndex, params: HnswParams) -> Result<Self> {
        params.validate()?;
        let n = index.len();
        let mut g = HnswGraph {
            params,
            links: Vec::with_capacity(n),
            entry: None,
            max_level: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mult = params.mult();
        let mut visited = Visited::new(n);
        for i in 0..n {
            let u: f64 = 1.0 - rng.random::<f64>();
            let level = ((-u.ln() * mult).floor() as usize).min(MAX_LEVEL);
            g.insert(index, i as u32, level, &mut visited);
        }
        Ok(g)
    }

    fn insert(&mut self, index: &DenseIndex, id: u32, level: usize, visited: &mut Visited) {
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(id);
            self.max_level = level;
            return;
        };
        let q = index.row_f64(id as usize);
        let mut eps = vec![Cand {
            score: index.score(&q, entry as usize),
            id: entry,
        }];
        for layer in (level + 1..=self.max_level).rev() {
            eps = self.search_layer(index, &q, &eps, 1, layer, visited);
        }
        let m = self.params.m;
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(index, &q, &eps, self.params.ef_construction, layer, visited);
            let chosen = select_neighbors(index, &found, m);
            self.links[id as usize][layer] = chosen.clone();
            let cap = if layer == 0 { 2 * m } else { m };
            for nb in chosen {
                let list = &mut self.links[nb as usize][layer];
                list.push(id);
                if list.len() > cap {
                    let mut cands: Vec<Cand> = list
                        .iter()
                        .map(|&x| Cand {
                            score: index.row_dot(nb as usize, x as usize),
                            id: x,
                        })
                        .collect();
                    cands.sort_by(|a, b| b.cmp(a));
                    self.links[nb as usize][layer] = select_neighbors(index, &cands, cap);
                }
            }
            eps = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(id);
        }
    }

    /// Best-first beam over one layer; returns up to `ef` nodes, best first.
    fn search_layer(
        &self,
        index: &DenseIndex,
        q: &[f64],
        entry: &[Cand],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Cand> {
        visited.reset();
        let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
        let mut best: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        for &c in entry {
            if visited.insert(c.id) {
                frontier.push(c);
                best.push(Reverse(c));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(c) = frontier.pop() {
            let worst = best.peek().expect("nonempty").0;
            if c < worst && best.len() >= ef {
                break;
            }
            for &nb in &self.links[c.id as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let cand = Cand {
                    score: index.score(q, nb as usize),
                    id: nb,
                };
                let worst = best.peek().expect("nonempty").0;
                if best.len() < ef || cand > worst {
                    frontier.push(cand);
                    best.push(Reverse(cand));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = best.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Approximate top-`k` by inner product. `ef` is raised to `k` if smaller.
    /// When `ef` covers the whole index the search is exhaustive.
    pub fn search(&self, index: &DenseIndex, q: &[f64], k: usize, ef: usize) -> Result<Hits> {
        index.check_query(q)?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let ef = ef.max(k);
        if ef >= index.len() {
            return index.exact_search(q, k);
        }
        Ok(self.graph_search(index, q, k, ef))
    }

    /// Graph traversal only, without the exhaustive shortcut.
    pub fn graph_search(&self, index: &DenseIndex, q: &[f64], k: usize, ef: usize) -> Hits {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut visited = Visited::new(index.len());
        let mut eps = vec![Cand {
            score: index.score(q, entry as usize),
            id: entry,
        }];
        for layer in (1..=self.max_level).rev() {
            eps = self.search_layer(index, q, &eps, 1, layer, &mut visited);
        }
        let found = self.search_layer(index, q, &eps, ef.max(k), 0, &mut visited);
        let mut hits: Hits = found
            .into_iter()
            .take(k)
            .map(|c| (c.id as usize, index.score(q, c.id as usize)))
            .collect();
        hits.sort_by(rank_order);
        hits
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.params;
        let mut buf = Vec::new();
        buf.extend_from_slice(GRAPH_MAGIC);
        buf.extend_from_slice(&GRAPH_VERSION.to_le_bytes());
        buf.extend_from_slice(&(p.m as u32).to_le_bytes());
        buf.extend_from_slice(&(p.ef_construction as u32).to_le_bytes());
        buf.extend_from_slice(&(p.ef_search as u32).to_le_bytes());
        buf.extend_from_slice(&p.level_mult.unwrap_or(f64::NAN).to_le_bytes());
        buf.extend_from_slice(&p.seed.to_le_bytes());
        buf.extend_from_slice(&(self.links.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.entry.map_or(u64::MAX, |e| e as u64).to_le_bytes());
        buf.extend_from_slice(&(self.max_level as u32).to_le_bytes());
        for node in &self.links {
            buf.extend_from_slice(&((node.len() - 1) as u32).to_le_bytes());
            for layer in node {
                buf.extend_from_slice(&(layer.len() as u32).to_le_bytes());
                for &nb in layer {
                    buf.extend_from_slice(&nb.to_le_bytes());
                }
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != GRAPH_MAGIC {
            return Err(Error::format(path, "bad graph magic"));
        }
        let version = r.u32()?;
        if version != GRAPH_VERSION {
            return Err(Error::format(path, format!("unsupported graph version {version}")));
        }
        let m = r.u32()? as usize;
        let ef_construction = r.u32()? as usize;
        let ef_search = r.u32()? as usize;
        let mult = r.f64()?;
        let seed = r.u64()?;
        let params = HnswParams {
            m,
            ef_construction,
            ef_search,
            level_mult: if mult.is_nan() { None } else { Some(mult) },
            seed,
        };
        let n = r.u64()? as usize;
        let entry = match r.u64()? {
            u64::MAX => None,
            e if (e as usize) < n => Some(e as u32),
            _ => return Err(Error::format(path, "entry point out of range")),
        };
        let max_level = r.u32()? as usize;
        let mut links = Vec::with_capacity(n);
        for _ in 0..n {
            let level = r.u32()? as usize;
            if level > MAX_LEVEL {
                return Err(Error::format(path, "node level out of range"));
            }
            let mut node = Vec::with_capacity(level + 1);
            for _ in 0..=level {
                let count = r.u32()? as usize;
                let list = (0..count)
                    .map(|_| {
                        let id = r.u32()?;
                        if id as usize >= n {
                            return Err(Error::format(path, "neighbour id out of range"));
                        }
                        Ok(id)
                    })
                    .collect::<Result<Vec<_>>>()?;
                node.push(list);
            }
            links.push(node);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after graph"));
        }
        Ok(HnswGraph {
            params,
            links,
            entry,
            max_level,
        })
    }
}

/// Diversity heuristic: keep a candidate only if it is more similar to the
/// base node than to every neighbour already kept; then fill remaining
/// slots with the best pruned candidates. `cands` must be best-first.
fn select_neighbors(index: &DenseIndex, cands: &[Cand], m: usize) -> Vec<u32> {
    let mut kept: Vec<Cand> = Vec::with_capacity(m);
    let mut pruned = Vec::new();
    for &c in cands {
        if kept.len() >= m {
            break;
        }
        let diverse = kept
            .iter()
            .all(|k| index.row_dot(c.id as usize, k.id as usize) < c.score);
        if diverse {
            kept.push(c);
        } else {
            pruned.push(c);
        }
    }
    for c in pruned {
        if kept.len() >= m {
            break;
        }
        kept.push(c);
    }
    kept.into_iter().map(|c| c.id).collect()
}
