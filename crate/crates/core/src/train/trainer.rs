use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{build_index, extract_and_edit, EmbeddingIndex};
use crate::error::{Error, Result};
use crate::kernel::{AdamState, ParamId, ParamStore, Tape, Var};
use crate::model::{DecodeOptions, InitMode, Model};
use crate::scalar::Scalar;
use crate::text::{apply_noise, Corpus, CorpusBundle, Language, Sentence};
use crate::train::config::{Mode, TrainConfig};
use crate::train::losses::{comparative_loss, evaluator_loss, prepare_candidates, selection_score, RankingBatch};
use crate::train::metrics::MetricsRow;

/// Best checkpoint by validation selection score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: u64,
    pub score: f64,
    pub d_s2t: f64,
    pub d_t2s: f64,
}

/// Everything that changes between steps besides the weights.
#[derive(Clone, Debug)]
pub struct TrainState<S> {
    /// Completed steps, pretraining included.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub adam_tr: AdamState<S>,
    pub adam_r: AdamState<S>,
    pub index_src: Option<EmbeddingIndex<S>>,
    pub index_tgt: Option<EmbeddingIndex<S>>,
    pub metrics: Vec<MetricsRow>,
    pub best: Option<BestRecord>,
    pub best_params: Option<ParamStore<S>>,
    /// `(sentence, top-1 edited)` pairs per direction for MLE retraining.
    pub pseudo: Option<[Vec<(Sentence, Sentence)>; 2]>,
}

/// Denoising batch drawn for one step.
struct LmBatch {
    src: Vec<usize>,
    tgt: Vec<usize>,
    noisy_src: Vec<Sentence>,
    noisy_tgt: Vec<Sentence>,
}

/// Losses of one update, for the metrics log.
struct StepLosses {
    total: f64,
    lm: f64,
    com: Option<f64>,
    r: Option<f64>,
}

fn scalar<S: Scalar>(tape: &Tape<S>, v: Var) -> f64 {
    tape.value(v).data()[0].to_f64_lossy()
}

fn at_step(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            detail: format!("non-finite value in {op}"),
        },
        Error::Divergence { detail, .. } => Error::Divergence { step, detail },
        other => other,
    }
}

fn token_mask(corpus: &Corpus, vocab_size: usize) -> Vec<bool> {
    let mut mask = vec![false; vocab_size];
    for s in &corpus.sentences {
        for &t in s.ids() {
            mask[t] = true;
        }
    }
    mask
}

/// Seeds the model initializer on its own stream so the training draws do
/// not depend on the model size.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

/// Denoising pretraining followed by one of the main training modes.
#[derive(Clone)]
pub struct Trainer<S> {
    pub config: TrainConfig,
    pub data: CorpusBundle,
    pub model: Model<S>,
    pub state: TrainState<S>,
    masks: [Vec<bool>; 2],
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig, data: CorpusBundle) -> Result<Self> {
        config.validate()?;
        for c in [&data.source, &data.target, &data.source_valid, &data.target_valid] {
            if c.is_empty() {
                return Err(Error::EmptyCorpus(c.provenance.clone().into()));
            }
        }
        if config.k > data.source.len().min(data.target.len()) {
            return Err(Error::Config(format!("k = {} exceeds the corpus size", config.k)));
        }
        let v = data.vocab.len();
        let mut model = Model::new(config.model_config(v), &mut init_rng(config.seed))?;
        if config.init == InitMode::OracleDictionary {
            if data.dictionary.is_empty() {
                return Err(Error::Config("oracle initialization needs a dictionary".into()));
            }
            model.apply_dictionary(&data.dictionary)?;
        }
        let adam_tr = AdamState::new(config.adam(), &model.store, &model.translator_params());
        let adam_r = AdamState::new(config.adam_eval(), &model.store, &model.evaluator_params());
        let masks = [token_mask(&data.source, v), token_mask(&data.target, v)];
        Ok(Trainer {
            state: TrainState {
                step: 0,
                rng: ChaCha8Rng::seed_from_u64(config.seed),
                adam_tr,
                adam_r,
                index_src: None,
                index_tgt: None,
                metrics: Vec::new(),
                best: None,
                best_params: None,
                pseudo: None,
            },
            config,
            data,
            model,
            masks,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.config.pretrain_steps + self.config.steps
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn in_pretraining(&self) -> bool {
        self.state.step < self.config.pretrain_steps
    }

    /// Decoding options for output language `lang`.
    pub fn decode_options(&self, lang: Language) -> DecodeOptions<'_> {
        DecodeOptions {
            max_len: self.config.max_len,
            allowed: self.config.restrict_decode.then(|| self.masks[lang.tag()].as_slice()),
        }
    }

    pub fn corpus(&self, lang: Language) -> &Corpus {
        match lang {
            Language::Source => &self.data.source,
            Language::Target => &self.data.target,
        }
    }

    fn draw_lm_batch(&mut self) -> LmBatch {
        let b = self.config.batch_size;
        let (ns, nt) = (self.data.source.len(), self.data.target.len());
        let rng = &mut self.state.rng;
        let src: Vec<usize> = (0..b).map(|_| rng.gen_range(0..ns)).collect();
        let tgt: Vec<usize> = (0..b).map(|_| rng.gen_range(0..nt)).collect();
        let (p, w) = (self.config.p_drop, self.config.shuffle_window);
        let noisy_src = src.iter().map(|&i| apply_noise(self.data.source.get(i), p, w, rng)).collect();
        let noisy_tgt = tgt.iter().map(|&i| apply_noise(self.data.target.get(i), p, w, rng)).collect();
        LmBatch {
            src,
            tgt,
            noisy_src,
            noisy_tgt,
        }
    }

    /// `L_S + L_T`: reconstruct each clean sentence from its noised copy.
    fn lm_loss(&self, tape: &mut Tape<S>, lm: &LmBatch) -> Result<Var> {
        let mut parts = Vec::with_capacity(2);
        for (lang, idx, noisy) in [
            (Language::Source, &lm.src, &lm.noisy_src),
            (Language::Target, &lm.tgt, &lm.noisy_tgt),
        ] {
            let corpus = self.corpus(lang);
            let clean: Vec<&Sentence> = idx.iter().map(|&i| corpus.get(i)).collect();
            let noisy: Vec<&Sentence> = noisy.iter().collect();
            parts.push(self.model.translation_nll(tape, &noisy, &clean, lang)?);
        }
        tape.add(parts[0], parts[1])
    }

    fn weighted(&self, tape: &mut Tape<S>, lm: Var, extra: Option<Var>) -> Result<Var> {
        let lm = if self.config.omega_lm == 1.0 {
            lm
        } else {
            tape.scale(lm, S::from_f64_lossy(self.config.omega_lm))?
        };
        match extra {
            Some(x) if self.config.omega_com != 0.0 => {
                let x = tape.scale(x, S::from_f64_lossy(self.config.omega_com))?;
                tape.add(lm, x)
            }
            _ => Ok(lm),
        }
    }

    /// Backward from `loss` and one Adam update of the translator group.
    fn update_translator(&mut self, tape: &Tape<S>, loss: Var) -> Result<()> {
        let grads = tape.backward(loss)?.params(tape);
        let before = self.config.audit.then(|| self.model.store.clone());
        self.state.adam_tr.apply(&mut self.model.store, &grads)?;
        if let Some(before) = before {
            self.audit(&before, &self.model.evaluator_params(), "translator update changed the evaluator")?;
        }
        Ok(())
    }

    fn audit(&self, before: &ParamStore<S>, untouched: &[ParamId], what: &str) -> Result<()> {
        if before.bits_equal(&self.model.store, untouched) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("isolation audit failed: {what}")))
        }
    }

    fn pretrain_step(&mut self) -> Result<StepLosses> {
        let lm = self.draw_lm_batch();
        let mut tape = Tape::with_trainable(&self.model.translator_params());
        let l_lm = self.lm_loss(&mut tape, &lm)?;
        let lm_value = scalar(&tape, l_lm);
        self.update_translator(&tape, l_lm)?;
        Ok(StepLosses {
            total: lm_value,
            lm: lm_value,
            com: None,
            r: None,
        })
    }

    fn refresh_indices(&mut self, main_step: u64) -> Result<()> {
        let episode = self.config.episode;
        let stale = |ix: &Option<EmbeddingIndex<S>>| ix.as_ref().is_none_or(|ix| ix.is_stale(main_step, episode));
        if stale(&self.state.index_src) || stale(&self.state.index_tgt) {
            self.state.index_src = Some(build_index(&self.model, &self.data.source, main_step)?);
            self.state.index_tgt = Some(build_index(&self.model, &self.data.target, main_step)?);
        }
        Ok(())
    }

    fn index(&self, lang: Language) -> Result<&EmbeddingIndex<S>> {
        match lang {
            Language::Source => self.state.index_src.as_ref(),
            Language::Target => self.state.index_tgt.as_ref(),
        }
        .ok_or_else(|| Error::Invalid("embedding index not built".into()))
    }

    fn adversarial_step(&mut self, main_step: u64) -> Result<StepLosses> {
        self.refresh_indices(main_step)?;
        let lm = self.draw_lm_batch();
        let cb = self.config.com_batch;
        let lambda = S::from_f64_lossy(self.config.lambda);
        let mut tape = Tape::with_trainable(&self.model.translator_params());
        let l_lm = self.lm_loss(&mut tape, &lm)?;

        let mut batches = Vec::with_capacity(2);
        for (lang, idx) in [(Language::Source, &lm.src[..cb]), (Language::Target, &lm.tgt[..cb])] {
            let corpus = self.corpus(lang);
            let other = lang.other();
            let sources: Vec<&Sentence> = idx.iter().map(|&i| corpus.get(i)).collect();
            let cands = prepare_candidates(
                &self.model,
                &sources,
                idx,
                self.index(other)?,
                self.corpus(other),
                self.config.k,
                self.decode_options(other),
            )?;
            batches.push(RankingBatch::encode(&mut tape, &self.model, &sources, &cands)?);
        }

        // evaluator update on detached embeddings
        let mut r_tape = Tape::with_trainable(&self.model.evaluator_params());
        let mut l_r = None;
        for b in &batches {
            let b = b.detached(&tape, &mut r_tape)?;
            let l = evaluator_loss(&mut r_tape, &self.model, &b, lambda)?;
            l_r = Some(match l_r {
                None => l,
                Some(acc) => r_tape.add(acc, l)?,
            });
        }
        let l_r = l_r.expect("two directions");
        let r_value = scalar(&r_tape, l_r);
        let grads = r_tape.backward(l_r)?.params(&r_tape);
        let before = self.config.audit.then(|| self.model.store.clone());
        self.state.adam_r.apply(&mut self.model.store, &grads)?;
        if let Some(before) = before {
            self.audit(&before, &self.model.translator_params(), "evaluator update changed the translator")?;
        }

        // translator update against the updated evaluator
        let lm_value = scalar(&tape, l_lm);
        let mut l_com = None;
        if self.config.omega_com != 0.0 {
            for b in &batches {
                let l = comparative_loss(&mut tape, &self.model, b, lambda)?;
                l_com = Some(match l_com {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
        }
        let total = self.weighted(&mut tape, l_lm, l_com)?;
        let losses = StepLosses {
            total: scalar(&tape, total),
            lm: lm_value,
            com: l_com.map(|v| scalar(&tape, v)),
            r: Some(r_value),
        };
        self.update_translator(&tape, total)?;
        Ok(losses)
    }

    fn back_translation_step(&mut self) -> Result<StepLosses> {
        let lm = self.draw_lm_batch();
        let cb = self.config.com_batch;
        let mut tape = Tape::with_trainable(&self.model.translator_params());
        let l_lm = self.lm_loss(&mut tape, &lm)?;
        let mut l_bt = None;
        for (lang, idx) in [(Language::Source, &lm.src[..cb]), (Language::Target, &lm.tgt[..cb])] {
            let corpus = self.corpus(lang);
            let sents: Vec<&Sentence> = idx.iter().map(|&i| corpus.get(i)).collect();
            let pseudo: Vec<Sentence> = self
                .model
                .translate(&sents, lang.other(), self.decode_options(lang.other()), cb)?
                .into_iter()
                .map(|d| d.sentence)
                .collect();
            let pseudo: Vec<&Sentence> = pseudo.iter().collect();
            let l = self.model.translation_nll(&mut tape, &pseudo, &sents, lang)?;
            l_bt = Some(match l_bt {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = self.weighted(&mut tape, l_lm, l_bt)?;
        let losses = StepLosses {
            total: scalar(&tape, total),
            lm: scalar(&tape, l_lm),
            com: l_bt.map(|v| scalar(&tape, v)),
            r: None,
        };
        self.update_translator(&tape, total)?;
        Ok(losses)
    }

    /// Builds `(sentence, top-1 edited)` pairs for both directions with the
    /// current model.
    pub fn build_pseudo_pairs(&self) -> Result<[Vec<(Sentence, Sentence)>; 2]> {
        let mut out: [Vec<(Sentence, Sentence)>; 2] = [Vec::new(), Vec::new()];
        for lang in [Language::Source, Language::Target] {
            let corpus = self.corpus(lang);
            let other = lang.other();
            let index = build_index(&self.model, self.corpus(other), 0)?;
            let sents: Vec<&Sentence> = corpus.sentences.iter().collect();
            let e_s = self.model.embed_sentences(&sents, 256)?;
            let ids: Vec<usize> = (0..sents.len()).collect();
            let ext = extract_and_edit(&self.model, &e_s, &ids, &index, self.corpus(other), 1, self.decode_options(other), false)?;
            out[lang.tag()] = ext
                .into_iter()
                .map(|e| (corpus.get(e.source).clone(), e.edited[0].clone()))
                .collect();
        }
        Ok(out)
    }

    fn mle_step(&mut self) -> Result<StepLosses> {
        if self.state.pseudo.is_none() {
            self.state.pseudo = Some(self.build_pseudo_pairs()?);
        }
        let lm = self.draw_lm_batch();
        let cb = self.config.com_batch;
        let picks: Vec<Vec<usize>> = self
            .state
            .pseudo
            .as_ref()
            .expect("built above")
            .iter()
            .map(|pairs| (0..cb).map(|_| self.state.rng.gen_range(0..pairs.len())).collect())
            .collect();
        let mut tape = Tape::with_trainable(&self.model.translator_params());
        let l_lm = self.lm_loss(&mut tape, &lm)?;
        let mut l_mle = None;
        let pseudo = self.state.pseudo.as_ref().expect("built above");
        for lang in [Language::Source, Language::Target] {
            let pairs = &pseudo[lang.tag()];
            let src: Vec<&Sentence> = picks[lang.tag()].iter().map(|&i| &pairs[i].0).collect();
            let tgt: Vec<&Sentence> = picks[lang.tag()].iter().map(|&i| &pairs[i].1).collect();
            let l = self.model.translation_nll(&mut tape, &src, &tgt, lang.other())?;
            l_mle = Some(match l_mle {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = self.weighted(&mut tape, l_lm, l_mle)?;
        let losses = StepLosses {
            total: scalar(&tape, total),
            lm: scalar(&tape, l_lm),
            com: l_mle.map(|v| scalar(&tape, v)),
            r: None,
        };
        self.update_translator(&tape, total)?;
        Ok(losses)
    }

    /// Validation selection scores `(D_s2t, D_t2s)` with freshly built indices.
    pub fn selection_scores(&self) -> Result<(f64, f64)> {
        let lambda = S::from_f64_lossy(self.config.lambda);
        let take = |c: &Corpus| -> Vec<Sentence> {
            let n = if self.config.valid_size == 0 { c.len() } else { self.config.valid_size.min(c.len()) };
            c.sentences[..n].to_vec()
        };
        let mut d = [0.0; 2];
        for (lang, valid) in [(Language::Source, &self.data.source_valid), (Language::Target, &self.data.target_valid)] {
            let other = lang.other();
            let index = build_index(&self.model, self.corpus(other), self.state.step)?;
            let sents = take(valid);
            let refs: Vec<&Sentence> = sents.iter().collect();
            d[lang.tag()] = selection_score(
                &self.model,
                &refs,
                &index,
                self.corpus(other),
                self.config.k,
                lambda,
                self.decode_options(other),
            )?;
        }
        Ok((d[0], d[1]))
    }

    fn validate_now(&self) -> bool {
        let step = self.state.step;
        let pre = self.config.pretrain_steps;
        if step == pre || step == self.total_steps() {
            return true;
        }
        let iv = self.config.valid_interval;
        step > pre && iv > 0 && (step - pre).is_multiple_of(iv)
    }

    /// Scores the current model and keeps it if it is the best so far.
    pub fn record_validation(&mut self) -> Result<(f64, f64)> {
        let (s2t, t2s) = self.selection_scores()?;
        let score = (s2t + t2s) / 2.0;
        if self.state.best.as_ref().is_none_or(|b| score > b.score) {
            self.state.best = Some(BestRecord {
                step: self.state.step,
                score,
                d_s2t: s2t,
                d_t2s: t2s,
            });
            self.state.best_params = Some(self.model.store.clone());
        }
        Ok((s2t, t2s))
    }

    /// Runs one step of whichever phase is current and logs it.
    pub fn step(&mut self) -> Result<MetricsRow> {
        if self.is_finished() {
            return Err(Error::Invalid("training already finished".into()));
        }
        let step = self.state.step + 1;
        let pre = self.config.pretrain_steps;
        let (mode, losses) = if self.in_pretraining() {
            ("pretrain", self.pretrain_step())
        } else {
            let main_step = self.state.step - pre;
            let mode = self.config.mode;
            let losses = match mode {
                Mode::ExtractEdit => self.adversarial_step(main_step),
                Mode::BackTranslation => self.back_translation_step(),
                Mode::MleRetrain => self.mle_step(),
            };
            (mode.name(), losses)
        };
        let losses = losses.map_err(at_step(step))?;
        self.state.step = step;
        let (d_s2t, d_t2s) = if self.validate_now() {
            let (a, b) = self.record_validation().map_err(at_step(step))?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        let row = MetricsRow {
            step,
            mode: mode.to_string(),
            loss_total: losses.total,
            loss_lm: losses.lm,
            loss_com: losses.com,
            loss_r: losses.r,
            d_s2t,
            d_t2s,
            skipped: 0,
        };
        self.state.metrics.push(row.clone());
        Ok(row)
    }

    /// Steps until finished, calling `hook` after every step.
    pub fn run(&mut self, mut hook: impl FnMut(&Self, &MetricsRow) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let row = self.step()?;
            hook(self, &row)?;
        }
        if self.state.best.is_none() {
            self.record_validation()?;
        }
        Ok(())
    }

    /// The best model seen so far, or the current one if none was scored.
    pub fn best_model(&self) -> Model<S> {
        let mut m = self.model.clone();
        if let Some(p) = &self.state.best_params {
            m.store = p.clone();
        }
        m
    }
}
