//! Multi-run experiments on a shared pretrained model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, token_accuracy};
use crate::scalar::Scalar;
use crate::text::{Language, Sentence};
use crate::train::export::Translator;
use crate::train::trainer::Trainer;

/// Scores of greedy translations of a gold test set in both directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldMetrics {
    pub accuracy_s2t: f64,
    pub accuracy_t2s: f64,
    pub bleu_s2t: f64,
    pub bleu_t2s: f64,
}

impl GoldMetrics {
    /// Mean token accuracy over both directions.
    pub fn accuracy(&self) -> f64 {
        (self.accuracy_s2t + self.accuracy_t2s) / 2.0
    }
}

pub fn gold_metrics<S: Scalar>(tr: &Translator<S>, gold: &[(Sentence, Sentence)], smoothing: bool) -> Result<GoldMetrics> {
    if gold.is_empty() {
        return Err(Error::degenerate("gold_metrics", "empty gold set"));
    }
    let (src, tgt): (Vec<Sentence>, Vec<Sentence>) = gold.iter().cloned().unzip();
    let hyp_t = tr.translate(&src, Language::Target)?;
    let hyp_s = tr.translate(&tgt, Language::Source)?;
    Ok(GoldMetrics {
        accuracy_s2t: token_accuracy(&hyp_t, &tgt)?,
        accuracy_t2s: token_accuracy(&hyp_s, &src)?,
        bleu_s2t: corpus_bleu(&hyp_t, &tgt, 4, smoothing)?.bleu,
        bleu_t2s: corpus_bleu(&hyp_s, &src, 4, smoothing)?.bleu,
    })
}

/// Runs pretraining only and returns the trainer positioned at the start of
/// the main phase.
pub fn pretrain<S: Scalar>(mut trainer: Trainer<S>) -> Result<Trainer<S>> {
    let main = trainer.config.steps;
    trainer.config.steps = 0;
    trainer.run(|_, _| Ok(()))?;
    trainer.config.steps = main;
    Ok(trainer)
}

/// Continues a copy of `pretrained` under a modified configuration. Settings
/// that shape pretraining or the optimizers must not change.
pub fn branch<S: Scalar>(pretrained: &Trainer<S>, edit: impl FnOnce(&mut crate::train::TrainConfig)) -> Result<Trainer<S>> {
    let mut t = pretrained.clone();
    edit(&mut t.config);
    t.config.validate()?;
    let (a, b) = (&pretrained.config, &t.config);
    if a.pretrain_steps != b.pretrain_steps || a.lr != b.lr || a.lr_eval != b.lr_eval || a.hidden != b.hidden || a.layers != b.layers {
        return Err(Error::Config("a branch may not change pretraining, model or optimizer settings".into()));
    }
    // the selection score depends on k and lambda; rescore the start point
    t.state.best = None;
    t.state.best_params = None;
    t.record_validation()?;
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub seed: u64,
    pub metrics: GoldMetrics,
    pub best_step: u64,
    pub best_score: f64,
}

pub const SWEEP_CSV_HEADER: &str = "k,seed,accuracy,accuracy_s2t,accuracy_t2s,bleu_s2t,bleu_t2s,best_step,best_score";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.k,
            self.seed,
            m.accuracy(),
            m.accuracy_s2t,
            m.accuracy_t2s,
            m.bleu_s2t,
            m.bleu_t2s,
            self.best_step,
            self.best_score
        )
    }
}

/// Trains one branch per `k` from the shared pretrained model and scores the
/// final weights on `gold`. Rows come back sorted by `k`. With `parallel`,
/// branches run on separate threads and branch `i` reseeds its sampler with
/// `seed + i + 1`.
pub fn sweep_k<S: Scalar>(
    pretrained: &Trainer<S>,
    ks: &[usize],
    gold: &[(Sentence, Sentence)],
    parallel: bool,
) -> Result<Vec<(SweepRow, Trainer<S>)>> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let run_one = |i: usize, k: usize| -> Result<(SweepRow, Trainer<S>)> {
        let mut t = branch(pretrained, |c| c.k = k)?;
        if parallel {
            use rand::SeedableRng;
            t.config.seed = pretrained.config.seed + i as u64 + 1;
            t.state.rng = rand_chacha::ChaCha8Rng::seed_from_u64(t.config.seed);
        }
        t.run(|_, _| Ok(()))?;
        let best = t.state.best.clone().expect("scored at branch start");
        let row = SweepRow {
            k,
            seed: t.config.seed,
            metrics: gold_metrics(&t.translator(false)?, gold, true)?,
            best_step: best.step,
            best_score: best.score,
        };
        Ok((row, t))
    };
    if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = ks.iter().enumerate().map(|(i, &k)| scope.spawn(move || run_one(i, k))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        })
    } else {
        ks.iter().enumerate().map(|(i, &k)| run_one(i, k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{generate_cipher_pair, CipherSpec};
    use crate::train::TrainConfig;

    fn setup() -> (Trainer<f64>, Vec<(Sentence, Sentence)>) {
        let spec = CipherSpec {
            vocab_size: 12,
            train_size: 100,
            valid_size: 8,
            test_size: 8,
            distractor_size: 0,
            ..CipherSpec::default()
        };
        let pair = generate_cipher_pair(&spec).unwrap();
        let gold = pair.gold_test.clone();
        let config = TrainConfig {
            hidden: 8,
            layers: 1,
            r_hidden: vec![8],
            r_out: 8,
            batch_size: 4,
            com_batch: 2,
            pretrain_steps: 2,
            steps: 2,
            max_len: 8,
            ..TrainConfig::default()
        };
        (Trainer::new(config, pair.into()).unwrap(), gold)
    }

    #[test]
    fn sweep_rows_are_sorted_and_share_pretraining() {
        let (t, gold) = setup();
        let pre = pretrain(t).unwrap();
        assert_eq!(pre.state.step, 2);
        let rows = sweep_k(&pre, &[3, 1], &gold, false).unwrap();
        assert_eq!(rows.iter().map(|r| r.0.k).collect::<Vec<_>>(), vec![1, 3]);
        for (_, t) in &rows {
            assert_eq!(t.state.metrics[..2], pre.state.metrics[..]);
            assert_eq!(t.state.step, 4);
        }
    }

    #[test]
    fn parallel_branches_get_distinct_seeds() {
        let (t, gold) = setup();
        let pre = pretrain(t).unwrap();
        let rows = sweep_k(&pre, &[1, 2], &gold, true).unwrap();
        assert_ne!(rows[0].0.seed, rows[1].0.seed);
    }

    #[test]
    fn branches_may_not_change_pretraining() {
        let (t, _) = setup();
        let pre = pretrain(t).unwrap();
        assert!(branch(&pre, |c| c.lr = 1.0).is_err());
    }
}
