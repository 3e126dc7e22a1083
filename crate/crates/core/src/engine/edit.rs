use crate::engine::index::{extract_topk, EmbeddingIndex, Neighbor};
use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::model::{Context, DecodeOptions, Model};
use crate::scalar::Scalar;
use crate::text::{Corpus, Language, Sentence};

/// Top-k extraction for one source sentence and its edited versions.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionResult<S> {
    pub source: usize,
    /// Ascending by distance, ties by corpus index.
    pub neighbors: Vec<Neighbor>,
    pub edited: Vec<Sentence>,
    /// `encode(t′)` rows, when requested.
    pub edited_embeddings: Option<Tensor<S>>,
}

fn rowwise_max<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| if y > x { y } else { x }).collect()
}

/// Decodes `maxpool(e_s[i], encode(targets[i]))` for every row into `lang`.
pub fn edit_batch<S: Scalar>(
    model: &Model<S>,
    e_s: &Tensor<S>,
    targets: &[&Sentence],
    lang: Language,
    opts: DecodeOptions<'_>,
) -> Result<Vec<Sentence>> {
    let (b, h) = e_s.dims2()?;
    if b != targets.len() {
        return Err(Error::dim("edit", format!("{b} source rows for {} targets", targets.len())));
    }
    let mut out = Vec::with_capacity(b);
    for (chunk, start) in targets.chunks(256).zip((0..b).step_by(256)) {
        let e_t = model.embed_sentences(chunk, 256)?;
        let mut pooled = Vec::with_capacity(chunk.len() * h);
        for i in 0..chunk.len() {
            pooled.extend(rowwise_max(e_s.row(start + i), e_t.row(i)));
        }
        let ctx = Context::Pooled(Tensor::new(vec![chunk.len(), h], pooled)?);
        out.extend(model.decode_greedy(&ctx, lang, opts)?.into_iter().map(|d| d.sentence));
    }
    Ok(out)
}

/// Edits a single extracted sentence: returns `t′` and `encode(t′)`.
pub fn edit<S: Scalar>(
    model: &Model<S>,
    e_s: &[S],
    t: &Sentence,
    lang: Language,
    opts: DecodeOptions<'_>,
) -> Result<(Sentence, Vec<S>)> {
    let es = Tensor::new(vec![1, e_s.len()], e_s.to_vec())?;
    let t_prime = edit_batch(model, &es, &[t], lang, opts)?.remove(0);
    let e = model.embed_sentences(&[&t_prime], 1)?;
    Ok((t_prime, e.into_data()))
}

/// Extracts the `k` nearest sentences of `corpus` for each source embedding
/// row and edits them toward the source. `sources[i]` is the corpus index of
/// the source behind row `i` of `e_s`, carried into the result.
#[allow(clippy::too_many_arguments)]
pub fn extract_and_edit<S: Scalar>(
    model: &Model<S>,
    e_s: &Tensor<S>,
    sources: &[usize],
    index: &EmbeddingIndex<S>,
    corpus: &Corpus,
    k: usize,
    opts: DecodeOptions<'_>,
    reencode: bool,
) -> Result<Vec<ExtractionResult<S>>> {
    let (b, h) = e_s.dims2()?;
    if index.len() != corpus.len() {
        return Err(Error::Invalid(format!("index of {} rows for corpus of {}", index.len(), corpus.len())));
    }
    let mut neighbors = Vec::with_capacity(b);
    let mut rows = Vec::with_capacity(b * k * h);
    let mut targets = Vec::with_capacity(b * k);
    for i in 0..b {
        let m = extract_topk(e_s.row(i), index, k)?;
        for n in &m {
            rows.extend_from_slice(e_s.row(i));
            targets.push(corpus.get(n.index));
        }
        neighbors.push(m);
    }
    let edited = edit_batch(model, &Tensor::new(vec![b * k, h], rows)?, &targets, corpus.language, opts)?;
    let embeddings = if reencode {
        let refs: Vec<&Sentence> = edited.iter().collect();
        Some(model.embed_sentences(&refs, 256)?)
    } else {
        None
    };
    let mut edited = edited.into_iter();
    Ok(neighbors
        .into_iter()
        .enumerate()
        .map(|(i, m)| ExtractionResult {
            source: sources.get(i).copied().unwrap_or(i),
            neighbors: m,
            edited: edited.by_ref().take(k).collect(),
            edited_embeddings: embeddings.as_ref().map(|e| {
                Tensor::new(vec![k, h], e.data()[i * k * h..(i + 1) * k * h].to_vec()).expect("k rows")
            }),
        })
        .collect())
}
