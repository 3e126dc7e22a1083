//! Extract, edit, evaluate: nearest-neighbor extraction over an embedding
//! index, max-pool editing and ranking of candidates through the evaluation
//! network.

pub mod dump;
pub mod edit;
pub mod index;
pub mod score;

pub use dump::{read_extractions, write_extractions};
pub use edit::{edit, edit_batch, extract_and_edit, ExtractionResult};
pub use index::{build_index, extract_topk, EmbeddingIndex, Neighbor};
pub use score::{rank_distribution, ranking_log_probs, ranking_scores, score_candidates};
