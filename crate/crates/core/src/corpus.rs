//! Source documents, fixed-size word chunking and the passage store.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_SIZE: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub body: String,
}

/// A chunk of at most `chunk_size` words from one source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: usize,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub position: usize,
}

/// Splits `doc.body` on runs of whitespace into disjoint chunks of
/// `chunk_size` words. Passage ids start at `first_id`.
pub fn chunk_document(doc: &SourceDocument, chunk_size: usize, first_id: usize) -> Result<Vec<Passage>> {
    if chunk_size == 0 {
        return Err(Error::InvalidArgument("chunk_size must be at least 1".into()));
    }
    let words: Vec<&str> = doc.body.split_whitespace().collect();
    if words.is_empty() {
        warn!("document {:?} has an empty body; skipped", doc.doc_id);
    }
    Ok(words
        .chunks(chunk_size)
        .enumerate()
        .map(|(position, chunk)| Passage {
            passage_id: first_id + position,
            doc_id: doc.doc_id.clone(),
            title: doc.title.clone(),
            text: chunk.join(" "),
            position,
        })
        .collect())
}

/// Passages indexed by a gapless id range `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PassageStore {
    passages: Vec<Passage>,
    doc_ids: HashSet<String>,
}

impl PassageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_documents(docs: &[SourceDocument], chunk_size: usize) -> Result<Self> {
        let mut store = Self::new();
        for d in docs {
            store.add_document(d, chunk_size)?;
        }
        Ok(store)
    }

    pub fn add_document(&mut self, doc: &SourceDocument, chunk_size: usize) -> Result<usize> {
        if !self.doc_ids.insert(doc.doc_id.clone()) {
            return Err(Error::DuplicateDocId(doc.doc_id.clone()));
        }
        let chunks = chunk_document(doc, chunk_size, self.passages.len())?;
        let n = chunks.len();
        self.passages.extend(chunks);
        Ok(n)
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Passage> {
        self.passages.get(id)
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn iter(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter()
    }

    /// Writes one JSON record per line in passage_id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for p in &self.passages {
            let line = serde_json::to_string(p).expect("passage serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = Self::new();
        for (line_no, rec) in read_jsonl::<Passage>(path)? {
            if rec.passage_id != store.passages.len() {
                return Err(Error::MalformedRecord {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!(
                        "passage_id {} out of order (expected {})",
                        rec.passage_id,
                        store.passages.len()
                    ),
                });
            }
            store.doc_ids.insert(rec.doc_id.clone());
            store.passages.push(rec);
        }
        Ok(store)
    }
}

/// Reads a corpus file (one `SourceDocument` per line) and chunks it.
pub fn ingest_corpus(path: &Path, chunk_size: usize) -> Result<PassageStore> {
    let mut store = PassageStore::new();
    for (_, doc) in read_jsonl::<SourceDocument>(path)? {
        store.add_document(&doc, chunk_size)?;
    }
    Ok(store)
}

pub fn read_documents(path: &Path) -> Result<Vec<SourceDocument>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, d)| d).collect())
}

pub fn write_documents(path: &Path, docs: &[SourceDocument]) -> Result<()> {
    write_jsonl(path, docs)
}

/// Parses a line-delimited JSON file. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, n_words: usize) -> SourceDocument {
        SourceDocument {
            doc_id: id.into(),
            title: format!("title {id}"),
            body: (0..n_words).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" "),
        }
    }

    fn word_count(p: &Passage) -> usize {
        p.text.split_whitespace().count()
    }

    #[test]
    fn exact_multiple_gives_one_full_chunk() {
        let ps = chunk_document(&doc("d", 100), 100, 0).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(word_count(&ps[0]), 100);
    }

    #[test]
    fn remainder_goes_to_last_chunk() {
        let ps = chunk_document(&doc("d", 250), 100, 0).unwrap();
        let counts: Vec<usize> = ps.iter().map(word_count).collect();
        assert_eq!(counts, [100, 100, 50]);
        assert_eq!(ps.iter().map(|p| p.position).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(ps.iter().all(|p| p.title == "title d"));
    }

    #[test]
    fn empty_body_gives_no_passages() {
        assert!(chunk_document(&doc("d", 0), 100, 0).unwrap().is_empty());
    }

    #[test]
    fn zero_chunk_size_is_rejected() {
        assert!(chunk_document(&doc("d", 3), 0, 0).is_err());
    }

    #[test]
    fn ingest_two_documents_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.jsonl");
        write_documents(&corpus, &[doc("a", 100), doc("b", 250)]).unwrap();
        let store = ingest_corpus(&corpus, 100).unwrap();
        assert_eq!(store.len(), 4);
        let ids: Vec<usize> = store.iter().map(|p| p.passage_id).collect();
        assert_eq!(ids, [0, 1, 2, 3]);

        let out = dir.path().join("passages.jsonl");
        store.save(&out).unwrap();
        assert_eq!(PassageStore::load(&out).unwrap(), store);
    }

    #[test]
    fn duplicate_doc_id_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.jsonl");
        write_documents(&corpus, &[doc("a", 3), doc("a", 4)]).unwrap();
        assert!(matches!(ingest_corpus(&corpus, 100), Err(Error::DuplicateDocId(id)) if id == "a"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.jsonl");
        std::fs::write(&corpus, "{\"doc_id\":\"a\",\"title\":\"\",\"body\":\"x\"}\nnot json\n").unwrap();
        match ingest_corpus(&corpus, 100) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn chunks_partition_the_word_sequence(
            words in proptest::collection::vec("[a-z]{1,6}", 0..300),
            chunk in 1usize..120,
        ) {
            let d = SourceDocument { doc_id: "x".into(), title: "t".into(), body: words.join("  \n ") };
            let ps = chunk_document(&d, chunk, 7).unwrap();
            let rejoined: Vec<String> = ps.iter()
                .flat_map(|p| p.text.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                .collect();
            prop_assert_eq!(&rejoined, &words);
            for (i, p) in ps.iter().enumerate() {
                prop_assert_eq!(p.passage_id, 7 + i);
                prop_assert_eq!(p.position, i);
                if i + 1 < ps.len() {
                    prop_assert_eq!(p.text.split_whitespace().count(), chunk);
                }
            }
            prop_assert_eq!(chunk_document(&d, chunk, 7).unwrap(), ps);
        }
    }
}
