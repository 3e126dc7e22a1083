use crate::error::{Error, Result};
use crate::text::Sentence;

/// Per pair, the fraction of the first `min(|c|, |r|)` positions where the
/// tokens agree; then the mean over pairs.
pub fn token_accuracy(candidates: &[Sentence], references: &[Sentence]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::dim("token_accuracy", format!("{} candidates, {} references", candidates.len(), references.len())));
    }
    if candidates.is_empty() {
        return Err(Error::degenerate("token_accuracy", "no pairs"));
    }
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            let n = c.len().min(r.len());
            let hits = c.ids().iter().zip(r.ids()).filter(|(a, b)| a == b).count();
            hits as f64 / n as f64
        })
        .sum();
    Ok(total / candidates.len() as f64)
}
