//! Corpus BLEU, token accuracy against gold pairs and the Hits@k retrieval
//! protocol with controlled distractor noise.

pub mod accuracy;
pub mod bleu;
pub mod hits;

pub use accuracy::token_accuracy;
pub use bleu::{corpus_bleu, BleuReport, BLEU_CSV_HEADER, SMOOTHING_EPSILON};
pub use hits::{distractor_count, hits_at_k, hits_from_embeddings, HitsReport, HITS_CSV_HEADER, HITS_KS};
