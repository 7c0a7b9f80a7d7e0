//! Word-level tokenizer and vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const SEP: TokenId = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<s>", "</s>", "<sep>"];

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_lowercase().collect());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Builds a vocabulary from raw texts. Tokens seen at least `min_count`
    /// times get ids, most frequent first (ties broken alphabetically).
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::EmptyInput("vocabulary corpus"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    /// A vocabulary of `size` ids with placeholder names; used for models
    /// built directly over token ids.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < NUM_RESERVED {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size {size} is smaller than the {NUM_RESERVED} reserved ids"
            )));
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain((NUM_RESERVED..size).map(|i| format!("t{i}")))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Encodes a generation target: the tokens followed by EOS.
    pub fn encode_target(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        ids
    }

    /// Joins tokens with single spaces, dropping PAD, BOS and EOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != RESERVED {
            return Err(Error::format(path, "vocabulary must start with the reserved tokens"));
        }
        Self::from_tokens(tokens).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("The Sun. rises,again"),
            ["the", "sun", ".", "rises", ",", "again"]
        );
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let v = Vocabulary::build(["a a b"], 1).unwrap();
        assert_eq!(v.len(), NUM_RESERVED + 2);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<sep>"), Some(SEP));
    }

    #[test]
    fn min_count_two_drops_rare_tokens() {
        let v = Vocabulary::build(["a a b"], 2).unwrap();
        assert_eq!(v.len(), NUM_RESERVED + 1);
        assert_eq!(v.encode("b a"), vec![UNK, 5]);
    }

    #[test]
    fn decode_inverts_encode_on_known_text() {
        let text = "the cat sat on the mat .";
        let v = Vocabulary::build([text], 1).unwrap();
        assert_eq!(v.decode(&v.encode(text)), text);
        assert_eq!(v.decode(&v.encode_target("the cat")), "the cat");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::build(std::iter::empty(), 1).is_err());
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::build(["x y z y"], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<pad>\n<unk>\n<s>\n</s>\n<sep>\ny\n"));
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
