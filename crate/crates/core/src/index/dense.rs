use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use crate::autodiff::ByteReader;
use crate::error::{Error, Result};

const INDEX_MAGIC: &[u8; 4] = b"RAGX";
const INDEX_VERSION: u32 = 1;

/// `(passage_id, inner product)` pairs, best first.
pub type Hits = Vec<(usize, f64)>;

/// Row `i` holds the embedding of passage `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    rows: Vec<f32>,
}

/// Descending score, then ascending id.
pub(crate) fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

impl DenseIndex {
    pub fn new(dim: usize, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 || !rows.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not form rows of width {dim}",
                rows.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "index_row" });
        }
        Ok(DenseIndex { dim, rows })
    }

    pub fn from_rows<I: IntoIterator<Item = Vec<f32>>>(dim: usize, rows: I) -> Result<Self> {
        let mut flat = Vec::new();
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            flat.extend(r);
        }
        Self::new(dim, flat)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Row widened to `f64`.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    /// Inner product of `q` with row `i`, accumulated in `f64`.
    pub fn score(&self, q: &[f64], i: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(q)
            .fold(0.0, |acc, (&r, &qv)| acc + qv * r as f64)
    }

    pub(crate) fn row_dot(&self, a: usize, b: usize) -> f64 {
        self.row(a)
            .iter()
            .zip(self.row(b))
            .fold(0.0, |acc, (&x, &y)| acc + x as f64 * y as f64)
    }

    pub(crate) fn check_query(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.len(),
            });
        }
        Ok(())
    }

    /// Brute-force maximum inner product search. Returns `min(k, len)` hits.
    pub fn exact_search(&self, q: &[f64], k: usize) -> Result<Hits> {
        self.check_query(q)?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let mut all: Hits = (0..self.len()).map(|i| (i, self.score(q, i))).collect();
        let k = k.min(all.len());
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, rank_order);
            all.truncate(k);
        }
        all.sort_by(rank_order);
        Ok(all)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.rows.len() * 4);
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.rows {
            buf.extend_from_slice(&v.to_le_bytes());
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
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::format(path, "bad index magic"));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::format(path, format!("unsupported index version {version}")));
        }
        let dim = r.u32()? as usize;
        let n = r.u64()? as usize;
        let rows = (0..n * dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after index rows"));
        }
        Self::new(dim, rows).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_rows() {
        let idx =
            DenseIndex::from_rows(3, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(idx.exact_search(&[0.0, 1.0, 0.0], 1).unwrap(), vec![(1, 1.0)]);
    }

    #[test]
    fn hand_computed_inner_products() {
        // [2,1]·[1,0] = 2, [2,1]·[0,1] = 1, [2,1]·[1,1] = 3
        let idx = DenseIndex::from_rows(2, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(
            idx.exact_search(&[2.0, 1.0], 3).unwrap(),
            vec![(2, 3.0), (0, 2.0), (1, 1.0)]
        );
    }

    #[test]
    fn k_larger_than_index_returns_everything() {
        let idx = DenseIndex::from_rows(2, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(idx.exact_search(&[1.0, 1.0], 10).unwrap().len(), 3);
    }

    #[test]
    fn ties_break_towards_lower_id() {
        let idx = DenseIndex::from_rows(1, vec![vec![1.0], vec![2.0], vec![2.0], vec![1.0]]).unwrap();
        assert_eq!(idx.exact_search(&[1.0], 3).unwrap(), vec![(1, 2.0), (2, 2.0), (0, 1.0)]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let idx = DenseIndex::from_rows(2, vec![vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            idx.exact_search(&[1.0], 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let idx = DenseIndex::from_rows(2, vec![vec![0.1, -3.5], vec![1e-30, 7.25]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.bin");
        idx.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"RAGX");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 4 * 4);
        assert_eq!(DenseIndex::load(&p).unwrap(), idx);
    }
}
