//! Comparative translation loss, evaluator loss and the selection score.

use crate::engine::{extract_and_edit, ranking_log_probs, EmbeddingIndex, ExtractionResult};
use crate::error::{Error, Result};
use crate::kernel::{Tape, Tensor, Var};
use crate::model::{Context, DecodeOptions, Model};
use crate::scalar::Scalar;
use crate::text::{Corpus, Sentence};

/// Translations `t*` and extracted-and-edited competitors for a batch of sources.
#[derive(Clone, Debug)]
pub struct Candidates<S> {
    pub translations: Vec<Sentence>,
    pub extractions: Vec<ExtractionResult<S>>,
}

impl<S: Scalar> Candidates<S> {
    pub fn len(&self) -> usize {
        self.translations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.translations.is_empty()
    }

    /// Competitors per source including `t*`.
    pub fn width(&self) -> usize {
        1 + self.extractions.first().map_or(0, |e| e.edited.len())
    }

    /// `t*` of source `i` followed by its edited sentences, for every source.
    pub fn interleaved(&self) -> Vec<&Sentence> {
        self.translations
            .iter()
            .zip(&self.extractions)
            .flat_map(|(t, e)| std::iter::once(t).chain(e.edited.iter()))
            .collect()
    }
}

/// Forward-only half of the comparative step: greedy translation of every
/// source into the language of `other`, then extraction from `other` and
/// editing toward the source.
#[allow(clippy::too_many_arguments)]
pub fn prepare_candidates<S: Scalar>(
    model: &Model<S>,
    sources: &[&Sentence],
    source_ids: &[usize],
    index: &EmbeddingIndex<S>,
    other: &Corpus,
    k: usize,
    opts: DecodeOptions<'_>,
) -> Result<Candidates<S>> {
    let ctx = model.context(sources)?;
    let e_s = match &ctx {
        Context::Attend { pooled, .. } | Context::Pooled(pooled) => pooled.clone(),
    };
    let translations = model
        .decode_greedy(&ctx, other.language, opts)?
        .into_iter()
        .map(|d| d.sentence)
        .collect();
    let extractions = extract_and_edit(model, &e_s, source_ids, index, other, k, opts, false)?;
    Ok(Candidates {
        translations,
        extractions,
    })
}

/// Source and candidate embeddings on a tape: `e_s` is `b x h`, `e_c` is
/// `(b·width) x h` with `t*` first in each group.
#[derive(Clone, Copy, Debug)]
pub struct RankingBatch {
    pub e_s: Var,
    pub e_c: Var,
    pub width: usize,
}

impl RankingBatch {
    /// Encodes sources and candidates with the current encoder.
    pub fn encode<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, sources: &[&Sentence], cands: &Candidates<S>) -> Result<Self> {
        if sources.len() != cands.len() {
            return Err(Error::dim("comparative_loss", format!("{} sources, {} candidate sets", sources.len(), cands.len())));
        }
        let e_s = model.encode(tape, sources)?.pooled;
        let e_c = model.encode(tape, &cands.interleaved())?.pooled;
        Ok(RankingBatch {
            e_s,
            e_c,
            width: cands.width(),
        })
    }

    /// The same embeddings as constants on another tape.
    pub fn detached<S: Scalar>(&self, from: &Tape<S>, to: &mut Tape<S>) -> Result<Self> {
        Ok(RankingBatch {
            e_s: to.constant(from.value(self.e_s).clone())?,
            e_c: to.constant(from.value(self.e_c).clone())?,
            width: self.width,
        })
    }

    pub fn from_values<S: Scalar>(tape: &mut Tape<S>, e_s: Tensor<S>, e_c: Tensor<S>, width: usize) -> Result<Self> {
        Ok(RankingBatch {
            e_s: tape.constant(e_s)?,
            e_c: tape.constant(e_c)?,
            width,
        })
    }

    pub fn rows<S: Scalar>(&self, tape: &Tape<S>) -> usize {
        tape.value(self.e_s).shape()[0]
    }

    pub fn log_probs<S: Scalar>(&self, tape: &mut Tape<S>, model: &Model<S>, lambda: S) -> Result<Var> {
        ranking_log_probs(tape, model, self.e_s, self.e_c, self.width, lambda)
    }
}

/// `-mean_s log P(t* | s, M′)`.
pub fn comparative_loss<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, batch: &RankingBatch, lambda: S) -> Result<Var> {
    let logp = batch.log_probs(tape, model, lambda)?;
    let (b, n) = (batch.rows(tape), batch.width);
    let w = -S::one() / S::from_f64_lossy(b as f64);
    let weights: Vec<S> = (0..b * n).map(|i| if i % n == 0 { w } else { S::zero() }).collect();
    tape.weighted_sum(logp, &weights)
}

/// `-mean_s mean_{t′∈M′} log P(t′ | s, M′)`; the normaliser still includes `t*`.
pub fn evaluator_loss<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, batch: &RankingBatch, lambda: S) -> Result<Var> {
    let logp = batch.log_probs(tape, model, lambda)?;
    let (b, n) = (batch.rows(tape), batch.width);
    if n < 2 {
        return Err(Error::degenerate("evaluator_loss", "no edited candidates"));
    }
    let w = -S::one() / S::from_f64_lossy((b * (n - 1)) as f64);
    let weights: Vec<S> = (0..b * n).map(|i| if i % n == 0 { S::zero() } else { w }).collect();
    tape.weighted_sum(logp, &weights)
}

/// Mean over `sources` of `log P(t* | s, M′)` under current parameters.
pub fn selection_score<S: Scalar>(
    model: &Model<S>,
    sources: &[&Sentence],
    index: &EmbeddingIndex<S>,
    other: &Corpus,
    k: usize,
    lambda: S,
    opts: DecodeOptions<'_>,
) -> Result<f64> {
    if sources.is_empty() {
        return Err(Error::degenerate("selection_score", "empty validation corpus"));
    }
    let mut total = 0.0;
    for (chunk_no, chunk) in sources.chunks(64).enumerate() {
        let ids: Vec<usize> = (0..chunk.len()).map(|i| chunk_no * 64 + i).collect();
        let cands = prepare_candidates(model, chunk, &ids, index, other, k, opts)?;
        let mut tape = Tape::new();
        let batch = RankingBatch::encode(&mut tape, model, chunk, &cands)?;
        let logp = batch.log_probs(&mut tape, model, lambda)?;
        let lp = tape.value(logp);
        total += (0..chunk.len()).map(|i| lp.row(i)[0].to_f64_lossy()).sum::<f64>();
    }
    Ok(total / sources.len() as f64)
}
