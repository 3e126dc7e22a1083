use crate::error::{Error, Result};
use crate::kernel::{Tape, Tensor, Var};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::text::{Sentence, PAD};

/// Encoder output for a batch: top-layer states `b x l x h` and their
/// max-pooled sentence embeddings `b x h`.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub memory: Var,
    pub pooled: Var,
    pub lengths: Vec<usize>,
}

/// Rows of a padded batch: token ids per step plus activity flags.
pub(crate) fn columns(sents: &[&[usize]]) -> (usize, Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let l = sents.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(l);
    let mut active = Vec::with_capacity(l);
    for t in 0..l {
        ids.push(sents.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect());
        active.push(sents.iter().map(|s| t < s.len()).collect());
    }
    (l, ids, active)
}

impl<S: Scalar> Model<S> {
    /// Runs the shared encoder over a batch of sentences.
    pub fn encode(&self, tape: &mut Tape<S>, sents: &[&Sentence]) -> Result<Encoded> {
        if sents.is_empty() {
            return Err(Error::degenerate("encode", "empty batch"));
        }
        let raw: Vec<&[usize]> = sents.iter().map(|s| s.ids()).collect();
        if raw.iter().any(|s| s.is_empty()) {
            return Err(Error::degenerate("encode", "empty sentence"));
        }
        if let Some(&bad) = raw.iter().flat_map(|s| s.iter()).find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::VocabMismatch(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let b = sents.len();
        let hd = self.config.hidden;
        let (_, ids, active) = columns(&raw);
        let table = tape.param(&self.store, self.embed)?;
        let zero = tape.constant(Tensor::zeros(&[b, hd]))?;
        let mut hs = vec![zero; self.enc.len()];
        let mut tops = Vec::with_capacity(ids.len());
        for (step_ids, step_active) in ids.iter().zip(&active) {
            let mut x = tape.embedding(table, step_ids)?;
            for (cell, h) in self.enc.iter().zip(hs.iter_mut()) {
                *h = cell.step(tape, &self.store, x, *h, step_active)?;
                x = *h;
            }
            tops.push(x);
        }
        let memory = tape.stack(&tops)?;
        let lengths: Vec<usize> = raw.iter().map(|s| s.len()).collect();
        let pooled = tape.max_over_time(memory, &lengths)?;
        Ok(Encoded { memory, pooled, lengths })
    }

    /// Forward-only sentence embeddings, one row per sentence, in batches of `batch`.
    pub fn embed_sentences(&self, sents: &[&Sentence], batch: usize) -> Result<Tensor<S>> {
        let hd = self.config.hidden;
        let mut data = Vec::with_capacity(sents.len() * hd);
        let mut tape = Tape::new();
        for chunk in sents.chunks(batch.max(1)) {
            tape.clear();
            let enc = self.encode(&mut tape, chunk)?;
            data.extend_from_slice(tape.value(enc.pooled).data());
        }
        Tensor::new(vec![sents.len(), hd], data)
    }
}
