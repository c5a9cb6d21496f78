use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::text::{entity_words, linearize};
use super::TripleStore;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const UNK: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Token → row index of the word-embedding table. Index 0 is `<unk>`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Collects every word of every stored fact plus the given extra phrases,
    /// sorted so the indices do not depend on insertion order.
    pub fn build<'a>(store: &TripleStore, extra: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: BTreeMap<String, ()> = BTreeMap::new();
        for f in store.iter() {
            for w in linearize(f) {
                words.insert(w, ());
            }
        }
        for phrase in extra {
            for w in entity_words(phrase) {
                words.insert(w, ());
            }
        }
        let mut tokens = Vec::with_capacity(words.len() + 1);
        tokens.push(UNK_TOKEN.to_string());
        tokens.extend(words.into_keys().filter(|w| w != UNK_TOKEN));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
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

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Overwrites embedding rows for tokens present in `vectors`; returns how many rows were set.
    pub fn load_vectors(&self, table: &mut Tensor, vectors: &[(String, Vec<f64>)]) -> Result<usize> {
        let dim = table.shape()[1];
        let mut loaded = 0;
        for (tok, v) in vectors {
            if v.len() != dim {
                return Err(Error::dims("load_vectors", &[dim], &[v.len()]));
            }
            if let Some(&row) = self.index.get(tok.as_str()) {
                table.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(v);
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

/// Parses a word-vector text file: one token followed by `dim` reals per line.
pub fn parse_word_vectors(text: &str, dim: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(tok) = parts.next() else { continue };
        let vals: core::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let vals = vals.map_err(|_| Error::Parse {
            line: i + 1,
            msg: "non-numeric vector component".to_string(),
        })?;
        if vals.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {dim} components, found {}", vals.len()),
            });
        }
        out.push((tok.to_string(), vals));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn unknown_tokens_map_to_unk() {
        let store = TripleStore::parse_tsv("cup\tUsedFor\tdrinking\t1\n").unwrap();
        let v = Vocabulary::build(&store, ["table"]);
        assert_eq!(v.id("zebra"), UNK);
        assert_ne!(v.id("cup"), UNK);
        assert_ne!(v.id("table"), UNK);
        assert_eq!(v.token(v.id("used")), Some("used"));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn loads_vectors_into_matching_rows() {
        let store = TripleStore::parse_tsv("cup\tUsedFor\tdrinking\t1\n").unwrap();
        let v = Vocabulary::build(&store, []);
        let mut table = Tensor::zeros(&[v.len(), 2]);
        let vecs = parse_word_vectors("cup 1.5 -2\nnope 3 3\n", 2).unwrap();
        assert_eq!(v.load_vectors(&mut table, &vecs).unwrap(), 1);
        let row = v.id("cup");
        assert_eq!(&table.data()[row * 2..row * 2 + 2], &[1.5, -2.0]);
        assert!(parse_word_vectors("cup 1\n", 2).is_err());
        assert_eq!(vecs[1].1, vec![3.0, 3.0]);
    }
}
