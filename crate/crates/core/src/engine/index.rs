use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::text::{Corpus, Sentence};

/// Snapshot of corpus sentence embeddings; row `i` is sentence `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex<S> {
    rows: Tensor<S>,
    /// Training step at which the snapshot was taken.
    pub stamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

impl<S: Scalar> EmbeddingIndex<S> {
    pub fn from_rows(rows: Tensor<S>, stamp: u64) -> Result<Self> {
        let (n, _) = rows.dims2()?;
        if n == 0 || rows.shape().len() != 2 {
            return Err(Error::degenerate("build_index", "index needs at least one 2-D row"));
        }
        Ok(EmbeddingIndex { rows, stamp })
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[S] {
        self.rows.row(i)
    }

    pub fn rows(&self) -> &Tensor<S> {
        &self.rows
    }

    /// True once `interval` or more steps have passed since the snapshot.
    pub fn is_stale(&self, step: u64, interval: u64) -> bool {
        step.saturating_sub(self.stamp) >= interval
    }
}

/// Encodes every sentence of `corpus` with the current encoder, forward only.
pub fn build_index<S: Scalar>(model: &Model<S>, corpus: &Corpus, stamp: u64) -> Result<EmbeddingIndex<S>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(corpus.provenance.clone().into()));
    }
    let sents: Vec<&Sentence> = corpus.sentences.iter().collect();
    EmbeddingIndex::from_rows(model.embed_sentences(&sents, 256)?, stamp)
}

fn distance<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// The `k` rows closest to `query` in L2 distance, ascending, ties by row index.
pub fn extract_topk<S: Scalar>(query: &[S], index: &EmbeddingIndex<S>, k: usize) -> Result<Vec<Neighbor>> {
    if query.len() != index.dim() {
        return Err(Error::dim("extract_topk", format!("query of {} for rows of {}", query.len(), index.dim())));
    }
    if k == 0 || k > index.len() {
        return Err(Error::Invalid(format!("k = {k} for an index of {} rows", index.len())));
    }
    let mut all: Vec<Neighbor> = (0..index.len())
        .map(|i| Neighbor {
            index: i,
            distance: distance(query, index.row(i)),
        })
        .collect();
    let order = |a: &Neighbor, b: &Neighbor| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index));
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, order);
        all.truncate(k);
    }
    all.sort_by(order);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_tensor, rng};
    use proptest::prelude::*;

    fn brute_force(query: &[f64], index: &EmbeddingIndex<f64>, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..index.len()).map(|i| (distance(query, index.row(i)), i)).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn self_query_ranks_first_at_zero() {
        let idx = EmbeddingIndex::from_rows(random_tensor(&mut rng(0), &[20, 6], 1.0), 0).unwrap();
        for j in 0..20 {
            let top = extract_topk(idx.row(j), &idx, 3).unwrap();
            assert_eq!(top[0].index, j);
            assert_eq!(top[0].distance, 0.0);
        }
    }

    #[test]
    fn exhaustive_k_returns_everything_sorted() {
        let idx = EmbeddingIndex::from_rows(random_tensor(&mut rng(1), &[12, 4], 1.0), 0).unwrap();
        let q = [0.1, -0.2, 0.3, 0.0];
        let top = extract_topk(&q, &idx, 12).unwrap();
        assert_eq!(top.len(), 12);
        assert!(top.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn fifty_rows_match_full_sort() {
        let mut r = rng(2);
        let idx = EmbeddingIndex::from_rows(random_tensor(&mut r, &[50, 8], 1.0), 0).unwrap();
        let q = random_tensor(&mut r, &[8], 1.0);
        let got: Vec<usize> = extract_topk(q.data(), &idx, 10).unwrap().iter().map(|n| n.index).collect();
        assert_eq!(got, brute_force(q.data(), &idx, 10));
    }

    #[test]
    fn ties_break_by_index() {
        let rows = Tensor::from_f64(&[4, 2], &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]).unwrap();
        let idx = EmbeddingIndex::from_rows(rows, 0).unwrap();
        let top = extract_topk(&[0.0, 0.0], &idx, 4).unwrap();
        assert_eq!(top.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn k_larger_than_index_is_an_error() {
        let idx = EmbeddingIndex::from_rows(Tensor::<f64>::zeros(&[1, 3]), 0).unwrap();
        assert!(extract_topk(&[0.0; 3], &idx, 2).is_err());
        assert!(extract_topk(&[0.0; 3], &idx, 0).is_err());
        assert_eq!(extract_topk(&[0.0; 3], &idx, 1).unwrap().len(), 1);
    }

    #[test]
    fn staleness_follows_interval() {
        let idx = EmbeddingIndex::from_rows(Tensor::<f64>::zeros(&[1, 3]), 100).unwrap();
        assert!(!idx.is_stale(149, 50));
        assert!(idx.is_stale(150, 50));
    }

    proptest! {
        #[test]
        fn topk_agrees_with_brute_force(n in 1usize..=100, k_seed in 0usize..1000, seed in 0u64..1000, coarse in any::<bool>()) {
            let mut r = rng(seed);
            let mut rows = random_tensor(&mut r, &[n, 3], 1.0);
            if coarse {
                // quantized rows force many exact distance ties
                for x in rows.data_mut() { *x = (*x * 2.0).round(); }
            }
            let idx = EmbeddingIndex::from_rows(rows, 0).unwrap();
            let k = 1 + k_seed % n;
            let q = random_tensor(&mut r, &[3], 1.0);
            let q: Vec<f64> = if coarse { q.data().iter().map(|x| (x * 2.0).round()).collect() } else { q.data().to_vec() };
            let got: Vec<usize> = extract_topk(&q, &idx, k).unwrap().iter().map(|m| m.index).collect();
            prop_assert_eq!(got, brute_force(&q, &idx, k));
        }
    }
}
