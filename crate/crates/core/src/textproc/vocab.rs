use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

/// Token ↔ id bijection with five reserved ids at the front.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Self::from_tokens(r.tokens)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Builds a vocabulary over every token in `corpus`, ordered by descending
    /// frequency then lexicographically.
    pub fn build<'a, I, S>(corpus: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for seq in corpus {
            any = true;
            for t in seq {
                let t = t.as_ref();
                if RESERVED.contains(&t) {
                    continue;
                }
                *counts.entry(t.to_string()).or_default() += 1;
            }
        }
        if !any || counts.is_empty() {
            return Err(Error::arg("cannot build a vocabulary from an empty corpus"));
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Decodes ids, dropping reserved tokens.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i >= RESERVED.len())
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::tokenize;

    #[test]
    fn reserved_plus_corpus_tokens() {
        let a = tokenize("a b");
        let b = tokenize("b c");
        let v = Vocabulary::build([a.as_slice(), b.as_slice()]).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.token(BOS), "<bos>");
        assert_eq!(v.token(5), "b"); // most frequent first
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("c"), 7);
        assert_eq!(v.id("zebra"), UNK);
        let again = Vocabulary::build([a.as_slice(), b.as_slice()]).unwrap();
        assert_eq!(v, again);
        assert_eq!(v.hash(), again.hash());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let none: Vec<&[String]> = vec![];
        assert!(Vocabulary::build(none).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let a = tokenize("x y z");
        let v = Vocabulary::build([a.as_slice()]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let w: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, w);
    }
}
