use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::text::Sentence;

pub const HITS_KS: [usize; 7] = [1, 3, 5, 8, 10, 15, 20];

pub const HITS_CSV_HEADER: &str = "noise_ratio,k,hits,queries,pool_size";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitsReport {
    pub noise_ratio: f64,
    pub queries: usize,
    pub pool_size: usize,
    pub ks: Vec<usize>,
    pub rates: Vec<f64>,
}

impl HitsReport {
    pub fn rate(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.rates[i])
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "Hits@k  noise {:.0}%  queries {}  pool {}\n",
            100.0 * self.noise_ratio,
            self.queries,
            self.pool_size
        );
        for (k, r) in self.ks.iter().zip(&self.rates) {
            let _ = writeln!(out, "  @{k:<3} {:6.2}%", 100.0 * r);
        }
        out
    }

    /// One line per k, without header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (k, r) in self.ks.iter().zip(&self.rates) {
            let _ = writeln!(out, "{},{k},{r},{},{}", self.noise_ratio, self.queries, self.pool_size);
        }
        out
    }
}

/// Distractors needed so that they make up `noise_ratio` of a pool that also
/// holds `n_gold` gold targets: `round(n_gold · r / (1 - r))`.
pub fn distractor_count(n_gold: usize, noise_ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&noise_ratio) {
        return Err(Error::Config(format!("noise ratio {noise_ratio} outside [0, 1)")));
    }
    Ok((n_gold as f64 * noise_ratio / (1.0 - noise_ratio)).round() as usize)
}

fn normalized<S: Scalar>(t: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
    let (n, _) = t.dims2()?;
    Ok((0..n)
        .map(|i| {
            let row: Vec<f64> = t.row(i).iter().map(|x| x.to_f64_lossy()).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.into_iter().map(|x| x / norm).collect()
        })
        .collect())
}

/// Hit rates when query `i` must retrieve candidate `gold[i]` by cosine
/// similarity. Ties rank lower candidate indices first.
pub fn hits_from_embeddings<S: Scalar>(queries: &Tensor<S>, candidates: &Tensor<S>, gold: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    let q = normalized(queries)?;
    let c = normalized(candidates)?;
    if q.len() != gold.len() || q.is_empty() {
        return Err(Error::dim("hits_at_k", format!("{} queries for {} gold indices", q.len(), gold.len())));
    }
    if gold.iter().any(|&g| g >= c.len()) {
        return Err(Error::Invalid("gold index outside the candidate pool".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut hits = vec![0usize; ks.len()];
    for (qi, &g) in q.iter().zip(gold) {
        let target = dot(qi, &c[g]);
        let rank = c
            .iter()
            .enumerate()
            .filter(|&(j, cj)| {
                let s = dot(qi, cj);
                s > target || (s == target && j < g)
            })
            .count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / q.len() as f64).collect())
}

/// Ranks every gold target and the first distractors of `pool` for each gold
/// source by cosine similarity in the evaluation network's space.
pub fn hits_at_k<S: Scalar>(
    model: &Model<S>,
    gold: &[(Sentence, Sentence)],
    pool: &[Sentence],
    noise_ratio: f64,
    ks: &[usize],
) -> Result<HitsReport> {
    if gold.is_empty() {
        return Err(Error::degenerate("hits_at_k", "no gold pairs"));
    }
    let need = distractor_count(gold.len(), noise_ratio)?;
    if need > pool.len() {
        return Err(Error::Invalid(format!(
            "noise ratio {noise_ratio} needs {need} distractors, only {} available",
            pool.len()
        )));
    }
    let sources: Vec<&Sentence> = gold.iter().map(|(s, _)| s).collect();
    let cands: Vec<&Sentence> = gold.iter().map(|(_, t)| t).chain(&pool[..need]).collect();
    let q = model.evaluate_values(&model.embed_sentences(&sources, 256)?)?;
    let c = model.evaluate_values(&model.embed_sentences(&cands, 256)?)?;
    let gold_idx: Vec<usize> = (0..gold.len()).collect();
    Ok(HitsReport {
        noise_ratio,
        queries: gold.len(),
        pool_size: cands.len(),
        ks: ks.to_vec(),
        rates: hits_from_embeddings(&q, &c, &gold_idx, ks)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::testutil::{random_tensor, rng};
    use crate::text::{generate_cipher_pair, CipherSpec};
    use proptest::prelude::*;

    #[test]
    fn pool_sizes() {
        assert_eq!(distractor_count(1000, 0.0).unwrap(), 0);
        assert_eq!(distractor_count(1000, 0.5).unwrap(), 1000);
        assert_eq!(distractor_count(1000, 0.9).unwrap(), 9000);
        assert!(distractor_count(10, 1.0).is_err());
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let c = random_tensor(&mut rng(1), &[50, 8], 1.0);
        let gold: Vec<usize> = (0..50).collect();
        assert_eq!(hits_from_embeddings(&c, &c, &gold, &[1]).unwrap(), vec![1.0]);
    }

    #[test]
    fn untrained_encoder_sits_at_chance() {
        let spec = CipherSpec {
            vocab_size: 100,
            test_size: 1000,
            distractor_size: 0,
            ..CipherSpec::default()
        };
        let pair = generate_cipher_pair(&spec).unwrap();
        let model = Model::<f64>::new(ModelConfig::new(pair.vocab.len()), &mut rng(4)).unwrap();
        let report = hits_at_k(&model, &pair.gold_test, &[], 0.0, &HITS_KS).unwrap();
        for (&k, &rate) in report.ks.iter().zip(&report.rates) {
            let p = k as f64 / 1000.0;
            let sigma = (p * (1.0 - p) / 1000.0).sqrt();
            assert!((rate - p).abs() <= 3.0 * sigma, "k={k}: {rate} vs chance {p} (sigma {sigma})");
        }
    }

    #[test]
    fn too_few_distractors_is_an_error() {
        let spec = CipherSpec {
            vocab_size: 20,
            test_size: 20,
            distractor_size: 5,
            ..CipherSpec::default()
        };
        let pair = generate_cipher_pair(&spec).unwrap();
        let model = Model::<f64>::new(ModelConfig::new(pair.vocab.len()), &mut rng(4)).unwrap();
        let pool = &pair.distractors.sentences;
        assert!(hits_at_k(&model, &pair.gold_test, pool, 0.5, &HITS_KS).is_err());
        assert_eq!(hits_at_k(&model, &pair.gold_test, pool, 0.2, &HITS_KS).unwrap().pool_size, 25);
    }

    proptest! {
        #[test]
        fn monotone_and_shuffle_invariant(seed in 0u64..300, n in 2usize..30, extra in 0usize..30) {
            let mut r = rng(seed);
            let q = random_tensor(&mut r, &[n, 4], 1.0);
            let c = random_tensor(&mut r, &[n + extra, 4], 1.0);
            let gold: Vec<usize> = (0..n).collect();
            let rates = hits_from_embeddings(&q, &c, &gold, &HITS_KS).unwrap();
            prop_assert!(rates.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(rates.iter().all(|&x| (0.0..=1.0).contains(&x)));
            // reversing the distractor block keeps membership
            let mut rows: Vec<f64> = (0..n).flat_map(|i| c.row(i).to_vec()).collect();
            rows.extend((n..n + extra).rev().flat_map(|i| c.row(i).to_vec()));
            let shuffled = Tensor::new(vec![n + extra, 4], rows).unwrap();
            prop_assert_eq!(rates, hits_from_embeddings(&q, &shuffled, &gold, &HITS_KS).unwrap());
        }
    }
}
