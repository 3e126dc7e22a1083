use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Sentence;

/// Numerator used for an n-gram order with zero matches when smoothing is on.
pub const SMOOTHING_EPSILON: f64 = 0.1;

/// Corpus BLEU: `100 · BP · exp(mean_n log p_n)`, `BP = min(1, exp(1 - r/c))`.
///
/// Orders for which neither side has any n-gram (all sentences shorter than
/// `n`) are left out of the mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
    pub smoothing: bool,
}

pub const BLEU_CSV_HEADER: &str = "bleu,p1,p2,p3,p4,brevity_penalty,candidate_length,reference_length,smoothing";

fn ngrams(s: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut out = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

pub fn corpus_bleu(candidates: &[Sentence], references: &[Sentence], max_n: usize, smoothing: bool) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(Error::dim("corpus_bleu", format!("{} candidates, {} references", candidates.len(), references.len())));
    }
    if references.is_empty() || max_n == 0 {
        return Err(Error::degenerate("corpus_bleu", "need at least one pair and one n-gram order"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut ref_totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let cn = ngrams(c.ids(), n);
            let rn = ngrams(r.ids(), n);
            totals[n - 1] += c.len().saturating_sub(n - 1);
            ref_totals[n - 1] += r.len().saturating_sub(n - 1);
            matches[n - 1] += cn.iter().map(|(g, &k)| k.min(rn.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut precisions = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut orders = 0;
    let mut zero = false;
    for n in 0..max_n {
        let (m, t) = (matches[n], totals[n]);
        let p = if t == 0 { 0.0 } else { m as f64 / t as f64 };
        precisions.push(p);
        if t == 0 && ref_totals[n] == 0 {
            continue;
        }
        orders += 1;
        let p_eff = if m == 0 && smoothing { SMOOTHING_EPSILON / t.max(1) as f64 } else { p };
        if p_eff == 0.0 {
            zero = true;
        } else {
            log_sum += p_eff.ln();
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let bleu = if zero || orders == 0 { 0.0 } else { 100.0 * bp * (log_sum / orders as f64).exp() };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty: bp,
        candidate_length: c_len,
        reference_length: r_len,
        smoothing,
    })
}

impl BleuReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("BLEU = {:.2}", self.bleu);
        let ps: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", 100.0 * p)).collect();
        let _ = write!(
            out,
            " ({}) BP = {:.4} hyp_len = {} ref_len = {} smoothing = {}",
            ps.join("/"),
            self.brevity_penalty,
            self.candidate_length,
            self.reference_length,
            if self.smoothing { "on" } else { "off" }
        );
        out.push('\n');
        out
    }

    /// One row under [`BLEU_CSV_HEADER`]; missing orders are empty.
    pub fn csv_row(&self) -> String {
        let p: Vec<String> = (0..4).map(|i| self.precisions.get(i).map(|x| x.to_string()).unwrap_or_default()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.bleu, p[0], p[1], p[2], p[3], self.brevity_penalty, self.candidate_length, self.reference_length, self.smoothing
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(ids: &[usize]) -> Sentence {
        Sentence::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn identity_is_one_hundred() {
        let c = vec![s(&[4, 5, 6, 7, 8]), s(&[9, 4])];
        let r = corpus_bleu(&c, &c, 4, false).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_is_zero_without_smoothing() {
        let c = vec![s(&[4, 5, 6, 7])];
        let r = vec![s(&[8, 9, 10, 11])];
        assert_eq!(corpus_bleu(&c, &r, 4, false).unwrap().bleu, 0.0);
        assert!(corpus_bleu(&c, &r, 4, true).unwrap().bleu > 0.0);
    }

    /// Hand computation with tokens written as letters, a..h = 4..11.
    ///
    /// ```text
    /// cand a b c d e   ref a b c d f   1g 4/5  2g 3/4  3g 2/3  4g 1/2
    /// cand a a g       ref a g h       1g 2/3 (a clipped to 1)  2g 1/2  3g 0/1
    /// cand b c d e     ref b c d e     1g 4/4  2g 3/3  3g 2/2  4g 1/1
    /// ```
    /// p = 10/12, 7/9, 4/6, 2/3; c = r = 12 so BP = 1.
    #[test]
    fn hand_computed_three_pairs() {
        let cands = vec![s(&[4, 5, 6, 7, 8]), s(&[4, 4, 10]), s(&[5, 6, 7, 8])];
        let refs = vec![s(&[4, 5, 6, 7, 9]), s(&[4, 10, 11]), s(&[5, 6, 7, 8])];
        let r = corpus_bleu(&cands, &refs, 4, false).unwrap();
        assert_eq!(r.matches, vec![10, 7, 4, 2]);
        assert_eq!(r.totals, vec![12, 9, 6, 3]);
        let want = 100.0 * ((10.0f64 / 12.0) * (7.0 / 9.0) * (4.0 / 6.0) * (2.0 / 3.0)).powf(0.25);
        assert!((r.bleu - want).abs() < 1e-9);
        // 100 * (140/486)^(1/4)
        assert!((r.bleu - 73.261_016_732_384_7).abs() < 1e-9);
    }

    #[test]
    fn brevity_penalty_applies_to_short_output() {
        let r = corpus_bleu(&[s(&[4, 5])], &[s(&[4, 5, 6, 7])], 1, false).unwrap();
        assert!((r.brevity_penalty - (-1.0f64).exp()).abs() < 1e-15);
        assert!((r.bleu - 100.0 * (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(corpus_bleu(&[s(&[4])], &[], 4, true).is_err());
    }

    fn corpus() -> impl Strategy<Value = Vec<(Vec<usize>, Vec<usize>)>> {
        let sent = prop::collection::vec(4usize..10, 1..8);
        prop::collection::vec((sent.clone(), sent), 1..8)
    }

    proptest! {
        #[test]
        fn self_bleu_is_one_hundred(pairs in corpus(), smoothing: bool) {
            let c: Vec<Sentence> = pairs.iter().map(|(a, _)| s(a)).collect();
            let r = corpus_bleu(&c, &c, 4, smoothing).unwrap();
            prop_assert!((r.bleu - 100.0).abs() < 1e-9);
        }

        #[test]
        fn pair_order_does_not_matter(pairs in corpus(), smoothing: bool) {
            let (c, r): (Vec<Sentence>, Vec<Sentence>) = pairs.iter().map(|(a, b)| (s(a), s(b))).unzip();
            let fwd = corpus_bleu(&c, &r, 4, smoothing).unwrap().bleu;
            let (cr, rr): (Vec<Sentence>, Vec<Sentence>) = (c.into_iter().rev().collect(), r.into_iter().rev().collect());
            prop_assert_eq!(fwd, corpus_bleu(&cr, &rr, 4, smoothing).unwrap().bleu);
        }

        #[test]
        fn unigram_bleu_is_precision(pairs in prop::collection::vec(prop::collection::vec(4usize..10, 1..8), 1..6), seed in 0u64..1000) {
            // references: same lengths, tokens shifted by a seed-dependent amount
            let c: Vec<Sentence> = pairs.iter().map(|a| s(a)).collect();
            let r: Vec<Sentence> = pairs
                .iter()
                .enumerate()
                .map(|(i, a)| s(&a.iter().map(|&t| 4 + (t + i + seed as usize) % 7).collect::<Vec<_>>()))
                .collect();
            let rep = corpus_bleu(&c, &r, 1, false).unwrap();
            prop_assert!((rep.bleu - 100.0 * rep.precisions[0]).abs() < 1e-9);
        }
    }
}
