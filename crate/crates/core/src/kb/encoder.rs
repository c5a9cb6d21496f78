use alloc::format;

use super::{FactTriple, Vocabulary};
use crate::error::{Error, Result};
use crate::numcore::Var;
use crate::params::{Group, Init, ParamId, ParamStore, Session};
use crate::nn::GruCell;

/// Word embedding table plus a bidirectional GRU over fact sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct FactEncoder {
    pub embed: ParamId,
    pub forward: GruCell,
    pub backward: GruCell,
    pub embed_dim: usize,
    pub hidden: usize,
}

/// A fact vector: both final hidden states concatenated (`2·hidden` wide).
#[derive(Debug, Clone, PartialEq)]
pub struct FactEncoding {
    pub vector: crate::numcore::Tensor,
    pub source: FactTriple,
}

impl FactEncoder {
    pub fn new(store: &mut ParamStore, name: &str, vocab_size: usize, embed_dim: usize, hidden: usize, seed: u64) -> Self {
        let embed = store.register(
            &format!("{name}.embed"),
            Group::Knowledge,
            &[vocab_size, embed_dim],
            Init::Uniform(0.5),
            seed,
        );
        let forward = GruCell::new(store, &format!("{name}.gru_fwd"), Group::Knowledge, embed_dim, hidden, seed);
        let backward = GruCell::new(store, &format!("{name}.gru_bwd"), Group::Knowledge, embed_dim, hidden, seed);
        Self {
            embed,
            forward,
            backward,
            embed_dim,
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Encodes token ids from zero initial states in both directions.
    pub fn encode_ids(&self, s: &mut Session, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty("encode_fact"));
        }
        let table = s.p(self.embed);
        let mut xs = alloc::vec::Vec::with_capacity(ids.len());
        for id in ids {
            xs.push(s.tape.row(table, *id)?);
        }
        let mut hf = s.tape.zeros(&[self.hidden]);
        for x in &xs {
            hf = self.forward.step(s, *x, hf)?;
        }
        let mut hb = s.tape.zeros(&[self.hidden]);
        for x in xs.iter().rev() {
            hb = self.backward.step(s, *x, hb)?;
        }
        s.tape.concat(&[hf, hb], 0)
    }

    pub fn encode_fact(&self, s: &mut Session, fact: &FactTriple, vocab: &Vocabulary) -> Result<Var> {
        let ids = vocab.ids(&super::linearize(fact));
        self.encode_ids(s, &ids)
    }

    /// Convenience wrapper returning a detached [`FactEncoding`].
    pub fn encode(&self, params: &ParamStore, fact: &FactTriple, vocab: &Vocabulary) -> Result<FactEncoding> {
        let mut s = Session::new(params, crate::params::GroupMask::NONE);
        let v = self.encode_fact(&mut s, fact, vocab)?;
        Ok(FactEncoding {
            vector: s.tape.to_tensor(v),
            source: fact.clone(),
        })
    }
}
