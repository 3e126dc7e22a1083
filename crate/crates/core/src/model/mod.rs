//! Shared recurrent encoder/decoder over a joint vocabulary plus the
//! evaluation network that maps sentence embeddings into the ranking space.

mod decoder;
mod encoder;
mod evaluator;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::checkpoint::{load_params, save_params};
use crate::kernel::gru::uniform;
use crate::kernel::{GruCell, ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

pub use decoder::{Conditioning, Context, DecodeOptions, Decoded};
pub use encoder::Encoded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Random,
    /// Random, then every target token's embedding row copies its dictionary source row.
    OracleDictionary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub r_hidden: Vec<usize>,
    pub r_out: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden: 64,
            layers: 2,
            r_hidden: vec![64, 64],
            r_out: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= crate::text::vocab::RESERVED.len() {
            return Err(Error::Config("vocabulary has no content tokens".into()));
        }
        if self.hidden == 0 || self.layers == 0 || self.r_out == 0 || self.r_hidden.contains(&0) {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

/// All learnable weights. Parameter groups: the encoder owns the token
/// embedding table, the decoder owns everything else on the generation path,
/// and the evaluation network is separate.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    embed: ParamId,
    enc: Vec<GruCell>,
    tag: ParamId,
    dec: Vec<GruCell>,
    w_ch: ParamId,
    w_cc: ParamId,
    b_c: ParamId,
    out: Linear,
    r: Vec<Linear>,
}

fn xavier<S: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<S> {
    uniform(rng, &[rows, cols], (6.0 / (rows + cols) as f64).sqrt())
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (v, h) = (config.vocab_size, config.hidden);
        let mut store = ParamStore::new();
        let embed = store.add("enc.embed", uniform(rng, &[v, h], 3f64.sqrt()));
        let enc = (0..config.layers)
            .map(|l| GruCell::register(&mut store, &format!("enc.gru{l}"), h, h, rng))
            .collect();
        let tag = store.add("dec.tag", uniform(rng, &[2, h], 3f64.sqrt()));
        let dec = (0..config.layers)
            .map(|l| GruCell::register(&mut store, &format!("dec.gru{l}"), h, h, rng))
            .collect();
        let w_ch = store.add("dec.w_ch", xavier(rng, h, h));
        let w_cc = store.add("dec.w_cc", xavier(rng, h, h));
        let b_c = store.add("dec.b_c", Tensor::zeros(&[h]));
        let out = Linear {
            w: store.add("dec.w_out", xavier(rng, h, v)),
            b: store.add("dec.b_out", Tensor::zeros(&[v])),
        };
        let mut r = Vec::new();
        let mut fan_in = h;
        for (i, &width) in config.r_hidden.iter().chain(std::iter::once(&config.r_out)).enumerate() {
            r.push(Linear {
                w: store.add(format!("eval.w{i}"), xavier(rng, fan_in, width)),
                b: store.add(format!("eval.b{i}"), Tensor::zeros(&[width])),
            });
            fan_in = width;
        }
        Ok(Model {
            config,
            store,
            embed,
            enc,
            tag,
            dec,
            w_ch,
            w_cc,
            b_c,
            out,
            r,
        })
    }

    /// Copies each source token's embedding row onto its target counterpart.
    pub fn apply_dictionary(&mut self, pairs: &[(usize, usize)]) -> Result<()> {
        let v = self.config.vocab_size;
        let table = self.store.get_mut(self.embed);
        let h = table.shape()[1];
        for &(s, t) in pairs {
            if s >= v || t >= v {
                return Err(Error::VocabMismatch(format!("dictionary entry ({s}, {t}) outside vocabulary of {v}")));
            }
            let row: Vec<S> = table.row(s).to_vec();
            table.data_mut()[t * h..(t + 1) * h].copy_from_slice(&row);
        }
        Ok(())
    }

    pub fn embedding_table(&self) -> ParamId {
        self.embed
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed];
        ids.extend(self.enc.iter().flat_map(GruCell::params));
        ids
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tag];
        ids.extend(self.dec.iter().flat_map(GruCell::params));
        ids.extend([self.w_ch, self.w_cc, self.b_c, self.out.w, self.out.b]);
        ids
    }

    /// Encoder and decoder together: the translation model.
    pub fn translator_params(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_params();
        ids.extend(self.decoder_params());
        ids
    }

    pub fn evaluator_params(&self) -> Vec<ParamId> {
        self.r.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(&self.store, path)
    }

    /// Loads weights into a model built with the same configuration.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        load_params(&mut self.store, path)
    }
}

#[cfg(test)]
mod tests;
