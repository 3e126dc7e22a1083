//! Vocabularies, corpora, the noise model and cipher-pair generation.

pub mod cipher;
pub mod corpus;
pub mod noise;
pub mod vocab;

pub use cipher::{generate_cipher_pair, Cipher, CipherPair, CipherSpec, CorpusBundle, ReorderRule};
pub use corpus::{load_corpus, Corpus, Language, Sentence, VocabMode};
pub use noise::apply_noise;
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

/// Default upper bound on sentence length.
pub const MAX_LEN: usize = 20;
