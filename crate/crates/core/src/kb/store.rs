use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

/// `⟨head, relation, tail, weight⟩` commonsense fact.
#[derive(Debug, Clone, PartialEq)]
pub struct FactTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub weight: f64,
}

impl FactTriple {
    pub fn new(head: &str, relation: &str, tail: &str, weight: f64) -> Result<Self> {
        if head.trim().is_empty() || relation.trim().is_empty() || tail.trim().is_empty() {
            return Err(Error::invalid("fact", "head, relation and tail must be non-empty"));
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::invalid("fact", format!("weight must be a non-negative number, got {weight}")));
        }
        Ok(Self {
            head: head.trim().to_string(),
            relation: relation.trim().to_string(),
            tail: tail.trim().to_string(),
            weight,
        })
    }
}

/// Ranking order for retrieval: heavier first, then relation, then tail.
pub fn retrieval_order(a: &FactTriple, b: &FactTriple) -> Ordering {
    b.weight
        .total_cmp(&a.weight)
        .then_with(|| a.relation.cmp(&b.relation))
        .then_with(|| a.tail.cmp(&b.tail))
}

/// Write-once triple store indexed by head token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripleStore {
    by_head: BTreeMap<String, Vec<FactTriple>>,
    len: usize,
}

impl TripleStore {
    /// Builds a store; duplicate `(head, relation, tail)` keys keep the maximum weight.
    pub fn from_triples(triples: impl IntoIterator<Item = FactTriple>) -> Self {
        let mut dedup: BTreeMap<(String, String, String), f64> = BTreeMap::new();
        for t in triples {
            let w = dedup.entry((t.head, t.relation, t.tail)).or_insert(t.weight);
            if t.weight > *w {
                *w = t.weight;
            }
        }
        let len = dedup.len();
        let mut by_head: BTreeMap<String, Vec<FactTriple>> = BTreeMap::new();
        for ((head, relation, tail), weight) in dedup {
            by_head.entry(head.clone()).or_default().push(FactTriple {
                head,
                relation,
                tail,
                weight,
            });
        }
        for facts in by_head.values_mut() {
            facts.sort_by(retrieval_order);
        }
        Self { by_head, len }
    }

    /// Parses the tab-separated `head relation tail weight` format.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut triples = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = trimmed.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected 4 tab-separated columns, found {}", cols.len()),
                });
            }
            let weight: f64 = cols[3].trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("weight {:?} is not a number", cols[3]),
            })?;
            let fact = FactTriple::new(cols[0], cols[1], cols[2], weight).map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
            triples.push(fact);
        }
        Ok(Self::from_triples(triples))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn heads(&self) -> impl Iterator<Item = &str> {
        self.by_head.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &FactTriple> {
        self.by_head.values().flatten()
    }

    /// Top-`k` facts whose head is `label`, by descending weight
    /// (ties: relation, then tail, lexicographically). Unknown labels yield
    /// an empty list.
    pub fn retrieve_topk(&self, label: &str, k: usize) -> Result<Vec<FactTriple>> {
        if k == 0 {
            return Err(Error::invalid("retrieve_topk", "k must be at least 1"));
        }
        Ok(self
            .by_head
            .get(label)
            .map(|facts| facts.iter().take(k).cloned().collect())
            .unwrap_or_default())
    }
}
