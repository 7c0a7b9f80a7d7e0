use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"RAGXPARM";
const CHECKPOINT_VERSION: u32 = 1;

/// Which sub-model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    QueryEncoder,
    DocEncoder,
    Generator,
}

impl Partition {
    fn code(self) -> u8 {
        match self {
            Partition::QueryEncoder => 0,
            Partition::DocEncoder => 1,
            Partition::Generator => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Partition::QueryEncoder),
            1 => Some(Partition::DocEncoder),
            2 => Some(Partition::Generator),
            _ => None,
        }
    }

    fn bit(self) -> u8 {
        1 << self.code()
    }
}

/// Set of partitions that receive gradients on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PartitionSet(u8);

impl PartitionSet {
    pub const fn none() -> Self {
        PartitionSet(0)
    }

    pub fn of(parts: &[Partition]) -> Self {
        PartitionSet(parts.iter().fold(0, |acc, p| acc | p.bit()))
    }

    /// Query encoder and generator: the partitions updated by fine-tuning.
    pub fn fine_tuned() -> Self {
        Self::of(&[Partition::QueryEncoder, Partition::Generator])
    }

    pub fn contains(self, p: Partition) -> bool {
        self.0 & p.bit() != 0
    }

    pub fn without(self, p: Partition) -> Self {
        PartitionSet(self.0 & !p.bit())
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub partition: Partition,
    pub value: Tensor,
}

/// Named, partition-labelled model parameters. Iteration order is by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, partition: Partition, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("parameter {name:?} already exists")));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "param_insert" });
        }
        self.params.insert(name, Param { partition, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Parameters of one partition, by name.
    pub fn partition(&self, part: Partition) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter().filter(move |(_, p)| p.partition == part)
    }

    /// Copies every parameter of `from` prefixed `src_prefix` onto the
    /// parameter with the same suffix under `dst_prefix`.
    pub fn copy_prefix(&mut self, src_prefix: &str, dst_prefix: &str) -> Result<()> {
        let pairs: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter_map(|(n, p)| {
                n.strip_prefix(src_prefix)
                    .map(|rest| (format!("{dst_prefix}{rest}"), p.value.clone()))
            })
            .collect();
        for (dst, value) in pairs {
            let p = self.get_mut(&dst)?;
            if !p.value.same_shape(&value) {
                return Err(Error::ShapeMismatch(format!("copy into {dst}")));
            }
            p.value = value;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(p.partition.code());
            buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(path, "parameter name is not utf-8"))?;
            let partition =
                Partition::from_code(r.take(1)?[0]).ok_or_else(|| Error::format(path, "bad partition code"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let value = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
            store.insert(name, partition, value)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(store)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        s.insert(
            "a.w",
            Partition::Generator,
            Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, 1e-300]).unwrap(),
        )
        .unwrap();
        s.insert(
            "b",
            Partition::DocEncoder,
            Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.bin");
        s.save(&p).unwrap();
        let back = ParamStore::load(&p).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.bin");
        std::fs::write(&p, b"NOTMAGIC\x01\x00\x00\x00").unwrap();
        assert!(matches!(ParamStore::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn partition_set_membership() {
        let s = PartitionSet::fine_tuned();
        assert!(s.contains(Partition::QueryEncoder));
        assert!(s.contains(Partition::Generator));
        assert!(!s.contains(Partition::DocEncoder));
        assert!(!s.without(Partition::QueryEncoder).contains(Partition::QueryEncoder));
    }
}
