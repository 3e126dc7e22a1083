//! Self-contained inference bundle: weights, vocabulary and decoding limits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecodeOptions, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::text::{Language, Sentence, Vocabulary, UNK};
use crate::train::trainer::{init_rng, Trainer};

pub const CARD_FILE: &str = "card.json";
pub const WEIGHTS_FILE: &str = "model.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub model: ModelConfig,
    pub max_len: usize,
    /// Token ids each output language may use; `None` leaves decoding unrestricted.
    pub allowed: Option<[Vec<usize>; 2]>,
    pub step: u64,
    /// Validation selection score of these weights, when known.
    pub score: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Translator<S> {
    pub model: Model<S>,
    pub vocab: Vocabulary,
    pub card: ModelCard,
    masks: Option<[Vec<bool>; 2]>,
}

fn masks(card: &ModelCard) -> Result<Option<[Vec<bool>; 2]>> {
    let Some(allowed) = &card.allowed else { return Ok(None) };
    let v = card.model.vocab_size;
    let build = |ids: &[usize]| -> Result<Vec<bool>> {
        let mut m = vec![false; v];
        for &i in ids {
            *m.get_mut(i).ok_or_else(|| Error::VocabMismatch(format!("allowed token {i} outside vocabulary of {v}")))? = true;
        }
        Ok(m)
    };
    Ok(Some([build(&allowed[0])?, build(&allowed[1])?]))
}

impl<S: Scalar> Translator<S> {
    pub fn new(model: Model<S>, vocab: Vocabulary, card: ModelCard) -> Result<Self> {
        if vocab.len() != model.config.vocab_size {
            return Err(Error::VocabMismatch(format!(
                "model expects {} tokens, vocabulary has {}",
                model.config.vocab_size,
                vocab.len()
            )));
        }
        let masks = masks(&card)?;
        Ok(Translator { model, vocab, card, masks })
    }

    pub fn decode_options(&self, lang: Language) -> DecodeOptions<'_> {
        DecodeOptions {
            max_len: self.card.max_len,
            allowed: self.masks.as_ref().map(|m| m[lang.tag()].as_slice()),
        }
    }

    /// Parses a whitespace-tokenized line; tokens outside the vocabulary are an error.
    pub fn parse(&self, line: &str) -> Result<Sentence> {
        let s = Sentence::parse(line, &self.vocab)?;
        if let Some(pos) = s.ids().iter().position(|&t| t == UNK) {
            let tok = line.split_whitespace().nth(pos).unwrap_or_default();
            if tok != self.vocab.token(UNK) {
                return Err(Error::VocabMismatch(format!("token {tok:?} is not in the model vocabulary")));
            }
        }
        Ok(s)
    }

    /// Greedy translation into `lang`.
    pub fn translate(&self, sents: &[Sentence], lang: Language) -> Result<Vec<Sentence>> {
        let refs: Vec<&Sentence> = sents.iter().collect();
        Ok(self
            .model
            .translate(&refs, lang, self.decode_options(lang), 64)?
            .into_iter()
            .map(|d| d.sentence)
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save(&dir.join(WEIGHTS_FILE))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let text = serde_json::to_string_pretty(&self.card).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(dir.join(CARD_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let card_path = dir.join(CARD_FILE);
        let card: ModelCard =
            serde_json::from_str(&std::fs::read_to_string(&card_path)?).map_err(|e| Error::Format {
                path: card_path.clone(),
                detail: e.to_string(),
            })?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let mut model = Model::new(card.model.clone(), &mut init_rng(0))?;
        model.load(&dir.join(WEIGHTS_FILE))?;
        Translator::new(model, vocab, card)
    }
}

impl<S: Scalar> Trainer<S> {
    /// Inference bundle of the current weights, or of the best validated ones.
    pub fn translator(&self, best: bool) -> Result<Translator<S>> {
        let allowed = self.config.restrict_decode.then(|| {
            [Language::Source, Language::Target].map(|l| {
                let opts = self.decode_options(l);
                let m = opts.allowed.unwrap_or(&[]);
                (0..m.len()).filter(|&i| m[i]).collect::<Vec<_>>()
            })
        });
        let (model, step, score) = match (&self.state.best, best) {
            (Some(b), true) => (self.best_model(), b.step, Some(b.score)),
            _ => (self.model.clone(), self.state.step, None),
        };
        Translator::new(
            model,
            self.data.vocab.clone(),
            ModelCard {
                model: self.model.config.clone(),
                max_len: self.config.max_len,
                allowed,
                step,
                score,
            },
        )
    }
}
