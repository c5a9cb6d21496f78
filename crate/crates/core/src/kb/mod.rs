//! Commonsense triple store, retrieval, and fact encoding.

mod encoder;
mod store;
mod text;
mod vocab;

pub use encoder::{FactEncoder, FactEncoding};
pub use store::{retrieval_order, FactTriple, TripleStore};
pub use text::{camel_words, entity_words, linearize};
pub use vocab::{parse_word_vectors, Vocabulary, UNK, UNK_TOKEN};

/// Number of facts retrieved per object label.
pub const DEFAULT_TOP_K: usize = 8;
